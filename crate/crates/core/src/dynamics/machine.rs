//! Differential-algebraic machine equations shared by linearization and simulation.
//!
//! Stator resistance is neglected and the stator algebraic equations are solved
//! in closed form, so every model here is an explicit ODE driven by the terminal
//! voltage magnitude `V` and angle `θ`:
//!
//! ```text
//! V_d = V sin(δ-θ)        V_q = V cos(δ-θ)
//! I_d = (E - V_q) / X_d'  I_q = V_d / X_q       (classical: X_q = X_d', E = E')
//! dδ/dt    = ω_s ω
//! dω/dt    = (τ_m - P_e - D ω) / 2H,           P_e = V_d I_d + V_q I_q
//! dE_q'/dt = (-E_q' - (X_d - X_d') I_d + E_fd) / T_d0'
//! dE_fd/dt = (-E_fd + K_A (V_ref - V)) / T_A
//! ```
//!
//! The terminal current phasor is `(I_d + j I_q) e^{j(δ - π/2)}`.

use num_complex::Complex64;
use num_dual::DualNum;
use std::f64::consts::FRAC_PI_2;

use super::params::{ModelOrder, ParamSet};

/// Synchronous speed, rad/s (60 Hz system).
pub const OMEGA_S: f64 = 2.0 * std::f64::consts::PI * 60.0;

/// Scalar usable in the machine equations: `f64` or a forward-mode dual number.
pub(crate) trait Scalar: DualNum<Primitive = f64> + Copy {}
impl<T: DualNum<Primitive = f64> + Copy> Scalar for T {}

pub(crate) const DELTA: usize = 0;
pub(crate) const OMEGA: usize = 1;
pub(crate) const EQ: usize = 2;
pub(crate) const EFD: usize = 3;

/// Exogenous machine inputs held at their set points unless forced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Controls {
    pub tm: f64,
    pub vref: f64,
}

/// Internal EMF behind the transient reactance for the given state vector.
#[inline]
pub(crate) fn emf<T: Scalar>(model: ModelOrder, p: &ParamSet<T>, x: &[T]) -> T {
    match model {
        ModelOrder::Classical2 => p.ep,
        ModelOrder::FluxDecay3 => x[EQ],
    }
}

#[inline]
pub(crate) fn q_reactance<T: Scalar>(model: ModelOrder, p: &ParamSet<T>) -> T {
    match model {
        ModelOrder::Classical2 => p.xdp,
        ModelOrder::FluxDecay3 => p.xq,
    }
}

/// Stator currents in the rotor frame.
#[inline]
pub(crate) fn dq_currents<T: Scalar>(
    model: ModelOrder,
    p: &ParamSet<T>,
    delta: T,
    e: T,
    v: T,
    theta: T,
) -> (T, T) {
    let (s, c) = (delta - theta).sin_cos();
    let id = (e - v * c) / p.xdp;
    let iq = v * s / q_reactance(model, p);
    (id, iq)
}

/// Terminal active and reactive power delivered by the machine.
pub(crate) fn terminal_power<T: Scalar>(
    model: ModelOrder,
    p: &ParamSet<T>,
    delta: T,
    e: T,
    v: T,
    theta: T,
) -> (T, T) {
    let (s, c) = (delta - theta).sin_cos();
    let (vd, vq) = (v * s, v * c);
    let (id, iq) = dq_currents(model, p, delta, e, v, theta);
    (vd * id + vq * iq, vq * id - vd * iq)
}

/// State derivatives.
pub(crate) fn rhs<T: Scalar>(
    model: ModelOrder,
    p: &ParamSet<T>,
    x: &[T],
    v: T,
    theta: T,
    tm: T,
    vref: T,
) -> Vec<T> {
    let e = emf(model, p, x);
    let (id, _) = dq_currents(model, p, x[DELTA], e, v, theta);
    let (pe, _) = terminal_power(model, p, x[DELTA], e, v, theta);
    let mut dx = Vec::with_capacity(model.n_states());
    dx.push(x[OMEGA] * OMEGA_S);
    dx.push((tm - pe - p.d * x[OMEGA]) / (p.h * 2.0));
    if model == ModelOrder::FluxDecay3 {
        dx.push((-x[EQ] - (p.xd - p.xdp) * id + x[EFD]) / p.td0p);
        dx.push((-x[EFD] + p.ka * (vref - v)) / p.ta);
    }
    dx
}

/// Terminal current magnitude and phase.
pub(crate) fn current_polar<T: Scalar>(
    model: ModelOrder,
    p: &ParamSet<T>,
    x: &[T],
    v: T,
    theta: T,
) -> (T, T) {
    let e = emf(model, p, x);
    let (id, iq) = dq_currents(model, p, x[DELTA], e, v, theta);
    let mag = (id * id + iq * iq).sqrt();
    let phase = x[DELTA] - FRAC_PI_2 + iq.atan2(id);
    (mag, phase)
}

/// Terminal current phasor in the network reference frame.
pub(crate) fn current_phasor(
    model: ModelOrder,
    p: &ParamSet<f64>,
    x: &[f64],
    v: Complex64,
) -> Complex64 {
    let e = emf(model, p, x);
    let (id, iq) = dq_currents(model, p, x[DELTA], e, v.norm(), v.arg());
    Complex64::new(id, iq) * Complex64::from_polar(1.0, x[DELTA] - FRAC_PI_2)
}
