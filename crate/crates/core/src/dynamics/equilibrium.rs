use serde::{Deserialize, Serialize};

use super::machine::{self, Scalar};
use super::params::{GeneratorParams, ModelOrder, ParamSet};
use crate::error::DynamicsError;

const MAX_ITER: usize = 50;
const TOL: f64 = 1e-10;
const SETTLE_STEPS: usize = 2;

/// Steady-state terminal condition: delivered complex power at a voltage phasor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminalCondition {
    pub p: f64,
    pub q: f64,
    pub v: f64,
    pub theta: f64,
}

impl TerminalCondition {
    /// Terminal condition implied by steady voltage and current phasors.
    pub fn from_phasors(v: f64, theta: f64, i: f64, phi: f64) -> Self {
        let s = num_complex::Complex64::from_polar(v, theta)
            * num_complex::Complex64::from_polar(i, phi).conj();
        Self {
            p: s.re,
            q: s.im,
            v,
            theta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPoint {
    pub model: ModelOrder,
    pub v0: f64,
    pub theta0: f64,
    pub i0: f64,
    pub phi0: f64,
    /// Delivered power implied by the solved machine state.
    pub p: f64,
    pub q: f64,
    pub delta0: f64,
    /// E_q' for the flux-decay model, E' for the classical model.
    pub e0: f64,
    /// AVR state (field voltage); zero for the classical model.
    pub efd0: f64,
    pub tm0: f64,
    pub vref0: f64,
}

impl EquilibriumPoint {
    pub fn states(&self) -> Vec<f64> {
        match self.model {
            ModelOrder::Classical2 => vec![self.delta0, 0.0],
            ModelOrder::FluxDecay3 => vec![self.delta0, 0.0, self.e0, self.efd0],
        }
    }

    /// Norm of the state derivative at this point.
    pub fn derivative_norm(&self, params: &GeneratorParams) -> f64 {
        let p = ParamSet::<f64>::lift(params);
        let dx = machine::rhs(
            self.model,
            &p,
            &self.states(),
            self.v0,
            self.theta0,
            self.tm0,
            self.vref0,
        );
        dx.iter().map(|d| d * d).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct EquilibriumT<T> {
    pub delta: T,
    pub e: T,
}

/// Solve the internal machine state that delivers `term`.
///
/// The flux-decay model matches both P and Q (unknowns δ, E_q'). The classical
/// model carries E' as a parameter, so only P is matched (unknown δ) and Q is
/// whatever the EMF implies.
pub fn solve_equilibrium(
    params: &GeneratorParams,
    term: &TerminalCondition,
) -> Result<EquilibriumPoint, DynamicsError> {
    params.validate()?;
    let p = ParamSet::<f64>::lift(params);
    let sol = solve_internal(params.model, &p, term)?;
    let (delta, e) = (sol.delta, sol.e);
    let x: Vec<f64> = match params.model {
        ModelOrder::Classical2 => vec![delta, 0.0],
        ModelOrder::FluxDecay3 => vec![delta, 0.0, e, 0.0],
    };
    let (pe, qe) = machine::terminal_power(params.model, &p, delta, e, term.v, term.theta);
    let (id, _) = machine::dq_currents(params.model, &p, delta, e, term.v, term.theta);
    let (i0, phi0) = machine::current_polar(params.model, &p, &x, term.v, term.theta);
    let (efd0, vref0) = match params.model {
        ModelOrder::Classical2 => (0.0, 0.0),
        ModelOrder::FluxDecay3 => {
            let efd = e + (params.xd - params.xd_prime) * id;
            (efd, term.v + efd / params.ka)
        }
    };
    Ok(EquilibriumPoint {
        model: params.model,
        v0: term.v,
        theta0: term.theta,
        i0,
        phi0,
        p: pe,
        q: qe,
        delta0: delta,
        e0: e,
        efd0,
        tm0: pe,
        vref0,
    })
}

/// Damped Newton on the terminal power balance, generic so parameter
/// derivatives of the equilibrium come out of the same iteration.
pub(crate) fn solve_internal<T: Scalar>(
    model: ModelOrder,
    p: &ParamSet<T>,
    term: &TerminalCondition,
) -> Result<EquilibriumT<T>, DynamicsError> {
    let v = T::from(term.v);
    let theta = T::from(term.theta);
    if term.v <= 0.0 {
        return Err(DynamicsError::DegenerateOperatingPoint(format!(
            "terminal voltage {}",
            term.v
        )));
    }
    match model {
        ModelOrder::Classical2 => {
            let a = term.p * p.xdp.re() / (p.ep.re() * term.v);
            if !(a.abs() < 1.0) {
                return Err(DynamicsError::NoEquilibrium {
                    iterations: 0,
                    residual: a.abs() - 1.0,
                });
            }
            let mut delta = theta + T::from(a.asin());
            let mut last = f64::INFINITY;
            let mut settled = 0;
            for _ in 0..MAX_ITER + SETTLE_STEPS {
                let (pe, _) = machine::terminal_power(model, p, delta, p.ep, v, theta);
                let f = pe - term.p;
                let df = p.ep * v * (delta - theta).cos() / p.xdp;
                let step = f / df;
                last = f.re().abs();
                if last < TOL {
                    // full steps after convergence settle the first- and then the
                    // second-order parts of a dual-valued solve
                    delta -= step;
                    settled += 1;
                    if settled == SETTLE_STEPS {
                        return Ok(EquilibriumT { delta, e: p.ep });
                    }
                    continue;
                }
                let mut alpha = 1.0;
                for _ in 0..20 {
                    let (pt, _) =
                        machine::terminal_power(model, p, delta - step * alpha, p.ep, v, theta);
                    if (pt.re() - term.p).abs() < last || alpha < 1e-4 {
                        break;
                    }
                    alpha *= 0.5;
                }
                delta -= step * alpha;
            }
            Err(DynamicsError::NoEquilibrium {
                iterations: MAX_ITER,
                residual: last,
            })
        }
        ModelOrder::FluxDecay3 => {
            // predictor from the q-axis EMF E_Q = V + j X_q I
            let s = num_complex::Complex64::new(term.p, term.q);
            let vph = num_complex::Complex64::from_polar(term.v, term.theta);
            let iph = (s / vph).conj();
            let eq_axis = vph + num_complex::Complex64::new(0.0, p.xq.re()) * iph;
            let mut delta = T::from(eq_axis.arg());
            let mut e = T::from(term.v);
            let mut last = f64::INFINITY;
            let mut settled = 0;
            for _ in 0..MAX_ITER + SETTLE_STEPS {
                let (pe, qe) = machine::terminal_power(model, p, delta, e, v, theta);
                let (f1, f2) = (pe - term.p, qe - term.q);
                let (j11, j12, j21, j22) = power_jacobian(p, delta, e, v, theta);
                let det = j11 * j22 - j12 * j21;
                if det.re().abs() < 1e-14 {
                    return Err(DynamicsError::SingularAlgebraicBlock(
                        "equilibrium Jacobian is singular".into(),
                    ));
                }
                let dd = (j22 * f1 - j12 * f2) / det;
                let de = (j11 * f2 - j21 * f1) / det;
                last = (f1.re().powi(2) + f2.re().powi(2)).sqrt();
                if last < TOL {
                    delta -= dd;
                    e -= de;
                    settled += 1;
                    if settled == SETTLE_STEPS {
                        return Ok(EquilibriumT { delta, e });
                    }
                    continue;
                }
                let mut alpha = 1.0;
                for _ in 0..20 {
                    let (nd, ne) = (delta - dd * alpha, e - de * alpha);
                    let (pt, qt) = machine::terminal_power(model, p, nd, ne, v, theta);
                    let n1 = ((pt.re() - term.p).powi(2) + (qt.re() - term.q).powi(2)).sqrt();
                    if n1 < last || alpha < 1e-4 {
                        break;
                    }
                    alpha *= 0.5;
                }
                delta -= dd * alpha;
                e -= de * alpha;
            }
            Err(DynamicsError::NoEquilibrium {
                iterations: MAX_ITER,
                residual: last,
            })
        }
    }
}

/// Analytic Jacobian of (P_e, Q_e) with respect to (δ, E_q') for the flux-decay model.
fn power_jacobian<T: Scalar>(p: &ParamSet<T>, delta: T, e: T, v: T, theta: T) -> (T, T, T, T) {
    let (s, c) = (delta - theta).sin_cos();
    let k = p.xq.recip() - p.xdp.recip();
    // P = E V s / X_d' + V^2 s c k
    // Q = E V c / X_d' - V^2 c^2 / X_d' - V^2 s^2 / X_q
    let dp_dd = e * v * c / p.xdp + v * v * (c * c - s * s) * k;
    let dp_de = v * s / p.xdp;
    let dq_dd = -(e * v * s) / p.xdp - v * v * s * c * k * 2.0;
    let dq_de = v * c / p.xdp;
    (dp_dd, dp_de, dq_dd, dq_de)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn flux_params() -> GeneratorParams {
        GeneratorParams {
            model: ModelOrder::FluxDecay3,
            h: 3.5,
            d: 2.0,
            xd: 1.2,
            xd_prime: 0.3,
            xq: 0.9,
            td0_prime: 6.0,
            e_prime: 0.0,
            ka: 40.0,
            ta: 0.2,
        }
    }

    #[test]
    fn classical_zero_transfer() {
        let p = GeneratorParams {
            model: ModelOrder::Classical2,
            h: 4.0,
            d: 1.0,
            xd: 0.0,
            xd_prime: 0.25,
            xq: 0.0,
            td0_prime: 0.0,
            e_prime: 1.0,
            ka: 0.0,
            ta: 0.0,
        };
        let term = TerminalCondition { p: 0.0, q: 0.0, v: 1.0, theta: 0.0 };
        let eq = solve_equilibrium(&p, &term).unwrap();
        assert!(eq.delta0.abs() < 1e-14);
        assert_eq!(eq.e0, 1.0);
        assert!(eq.i0 < 1e-14);
    }

    #[test]
    fn flux_decay_rated_point() {
        let p = flux_params();
        let term = TerminalCondition { p: 0.8, q: 0.25, v: 1.02, theta: 0.13 };
        let eq = solve_equilibrium(&p, &term).unwrap();
        assert!(eq.derivative_norm(&p) < 1e-9);
        assert!((eq.p - term.p).abs() < 1e-9 && (eq.q - term.q).abs() < 1e-9);
        let back = TerminalCondition::from_phasors(eq.v0, eq.theta0, eq.i0, eq.phi0);
        assert!((back.p - term.p).abs() < 1e-9 && (back.q - term.q).abs() < 1e-9);
        // field voltage that nulls dE_q'/dt
        let ps = ParamSet::<f64>::lift(&p);
        let (id, _) = machine::dq_currents(p.model, &ps, eq.delta0, eq.e0, eq.v0, eq.theta0);
        assert!((eq.efd0 - (eq.e0 + (p.xd - p.xd_prime) * id)).abs() < 1e-14);
    }

    #[test]
    fn infeasible_classical_transfer_is_rejected() {
        let mut p = flux_params();
        p.model = ModelOrder::Classical2;
        p.e_prime = 1.0;
        let term = TerminalCondition { p: 5.0, q: 0.0, v: 1.0, theta: 0.0 };
        assert!(matches!(
            solve_equilibrium(&p, &term),
            Err(DynamicsError::NoEquilibrium { .. })
        ));
    }
}
