//! Multi-machine time-domain simulation: machine ODEs coupled through the
//! algebraic network, trapezoidal rule with a chord Newton corrector.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use super::noise::{rng_stream, OuProcess, Stream};
use super::scenario::{ForcingChannel, SimScenario};
use crate::dynamics::machine::{self, DELTA};
use crate::dynamics::params::ParamSet;
use crate::dynamics::{solve_equilibrium, EquilibriumPoint, GeneratorParams, ModelOrder, PowerFlow, TerminalCondition};
use crate::error::SimError;

const NEWTON_TOL: f64 = 1e-11;
const NEWTON_MAX: usize = 25;
/// Half length of the anti-alias filter, s.
pub const FIR_HALF_SECONDS: f64 = 2.0;
/// Anti-alias cutoff as a fraction of the PMU Nyquist frequency.
pub const FIR_CUTOFF_FRACTION: f64 = 0.9;

/// Machine record with its operating point.
#[derive(Clone, Debug)]
pub struct MachineInit {
    pub params: GeneratorParams,
    pub eq: EquilibriumPoint,
}

/// Power flow plus per-machine equilibria. Classical machines get the E' the
/// power flow implies.
pub fn operating_point(sc: &SimScenario) -> Result<(PowerFlow, Vec<MachineInit>), SimError> {
    let pf = sc.network.power_flow()?;
    let mut out = Vec::with_capacity(sc.generators.len());
    for g in &sc.generators {
        let b = &sc.network.buses[g.bus];
        let term = TerminalCondition {
            p: pf.p[g.bus] + b.p_load,
            q: pf.q[g.bus] + b.q_load,
            v: pf.v[g.bus],
            theta: pf.theta[g.bus],
        };
        let mut params = g.params.clone();
        if params.model == ModelOrder::Classical2 {
            let v = pf.phasor(g.bus);
            let i = (Complex64::new(term.p, term.q) / v).conj();
            params.e_prime = (v + Complex64::i() * params.xd_prime * i).norm();
        }
        let eq = solve_equilibrium(&params, &term)?;
        out.push(MachineInit { params, eq });
    }
    Ok((pf, out))
}

struct Machine {
    model: ModelOrder,
    p: ParamSet<f64>,
    h: f64,
    bus: usize,
    offset: usize,
    tm0: f64,
    vref0: f64,
}

struct Load {
    alg: usize,
    s0: Complex64,
}

/// Time-varying exogenous inputs at one instant.
#[derive(Clone)]
struct Inputs {
    v_slack: Complex64,
    load_scale: Vec<(f64, f64)>,
    tm: Vec<f64>,
    vref: Vec<f64>,
}

struct Plant {
    y: DMatrix<Complex64>,
    slack: usize,
    alg_of_bus: Vec<Option<usize>>,
    n_alg: usize,
    machines: Vec<Machine>,
    loads: Vec<Load>,
    nx: usize,
}

impl Plant {
    fn bus_voltage(&self, bus: usize, y: &[f64], inp: &Inputs) -> Complex64 {
        match self.alg_of_bus[bus] {
            Some(a) => Complex64::new(y[2 * a], y[2 * a + 1]),
            None => inp.v_slack,
        }
    }

    fn f(&self, x: &[f64], y: &[f64], inp: &Inputs, out: &mut [f64]) {
        for (k, m) in self.machines.iter().enumerate() {
            let v = self.bus_voltage(m.bus, y, inp);
            let n = m.model.n_states();
            let dx = machine::rhs(m.model, &m.p, &x[m.offset..m.offset + n], v.norm(), v.arg(), inp.tm[k], inp.vref[k]);
            out[m.offset..m.offset + n].copy_from_slice(&dx);
        }
    }

    fn g(&self, x: &[f64], y: &[f64], inp: &Inputs, out: &mut [f64]) {
        let nb = self.alg_of_bus.len();
        let mut mis = vec![Complex64::new(0.0, 0.0); self.n_alg];
        for (bus, a) in self.alg_of_bus.iter().enumerate() {
            let Some(a) = *a else { continue };
            let mut s = Complex64::new(0.0, 0.0);
            for j in 0..nb {
                let yj = self.y[(bus, j)];
                if yj != Complex64::new(0.0, 0.0) {
                    s += yj * self.bus_voltage(j, y, inp);
                }
            }
            mis[a] = s;
        }
        for m in &self.machines {
            let v = self.bus_voltage(m.bus, y, inp);
            let n = m.model.n_states();
            let i = machine::current_phasor(m.model, &m.p, &x[m.offset..m.offset + n], v);
            if let Some(a) = self.alg_of_bus[m.bus] {
                mis[a] -= i;
            }
        }
        for (l, ld) in self.loads.iter().enumerate() {
            let v = Complex64::new(y[2 * ld.alg], y[2 * ld.alg + 1]);
            let (sp, sq) = inp.load_scale[l];
            let s = Complex64::new(ld.s0.re * sp, ld.s0.im * sq);
            mis[ld.alg] += (s / v).conj();
        }
        for (a, m) in mis.iter().enumerate() {
            out[2 * a] = m.re;
            out[2 * a + 1] = m.im;
        }
    }

    fn n(&self) -> usize {
        self.nx + 2 * self.n_alg
    }

    /// Trapezoidal residual for the unknown `u1 = [x1; y1]`; `f0` is `f` at the
    /// previous point.
    fn residual(&self, u0: &[f64], f0: &[f64], u1: &[f64], inp1: &Inputs, dt: f64, out: &mut [f64]) {
        let nx = self.nx;
        let (x1, y1) = u1.split_at(nx);
        let mut f1 = vec![0.0; nx];
        self.f(x1, y1, inp1, &mut f1);
        for i in 0..nx {
            out[i] = u1[i] - u0[i] - 0.5 * dt * (f0[i] + f1[i]);
        }
        self.g(x1, y1, inp1, &mut out[nx..]);
    }

    fn jacobian(&self, u0: &[f64], f0: &[f64], u1: &[f64], inp1: &Inputs, dt: f64) -> DMatrix<f64> {
        let n = self.n();
        let mut jac = DMatrix::zeros(n, n);
        let (mut rp, mut rm) = (vec![0.0; n], vec![0.0; n]);
        let mut u = u1.to_vec();
        for c in 0..n {
            let h = 1e-7 * (1.0 + u1[c].abs());
            u[c] = u1[c] + h;
            self.residual(u0, f0, &u, inp1, dt, &mut rp);
            u[c] = u1[c] - h;
            self.residual(u0, f0, &u, inp1, dt, &mut rm);
            u[c] = u1[c];
            for r in 0..n {
                jac[(r, c)] = (rp[r] - rm[r]) / (2.0 * h);
            }
        }
        jac
    }
}

/// Terminal signals of every machine on the integration grid.
pub(crate) struct Trajectory {
    /// `[machine][channel][step]` with channels `[V, θ, I, φ]`.
    pub signals: Vec<[Vec<f64>; 4]>,
    /// Inertia-weighted mean rotor angle per step.
    pub coi: Vec<f64>,
    /// Time of step 0.
    pub t0: f64,
}

fn unwrap_near(angle: f64, reference: f64) -> f64 {
    angle + TAU * ((reference - angle) / TAU).round()
}

/// Integrate from `t = 0` to `t_end`, keeping samples with `t ≥ t_keep`.
pub(crate) fn integrate(sc: &SimScenario, t_keep: f64, t_end: f64) -> Result<(Trajectory, Vec<MachineInit>), SimError> {
    sc.validate()?;
    let (pf, inits) = operating_point(sc)?;
    let nb = sc.network.n_buses();
    let slack = sc.network.slack();
    let mut alg_of_bus = vec![None; nb];
    let mut n_alg = 0;
    for (b, a) in alg_of_bus.iter_mut().enumerate() {
        if b != slack {
            *a = Some(n_alg);
            n_alg += 1;
        }
    }
    let mut machines = Vec::new();
    let mut nx = 0;
    for (g, init) in sc.generators.iter().zip(&inits) {
        machines.push(Machine {
            model: init.params.model,
            p: ParamSet::lift(&init.params),
            h: init.params.h,
            bus: g.bus,
            offset: nx,
            tm0: init.eq.tm0,
            vref0: init.eq.vref0,
        });
        nx += init.params.model.n_states();
    }
    let loads: Vec<Load> = sc
        .network
        .buses
        .iter()
        .enumerate()
        .filter(|(b, bus)| *b != slack && (bus.p_load != 0.0 || bus.q_load != 0.0))
        .map(|(b, bus)| Load {
            alg: alg_of_bus[b].unwrap(),
            s0: Complex64::new(bus.p_load, bus.q_load),
        })
        .collect();
    let plant = Plant {
        y: sc.network.ybus(),
        slack,
        alg_of_bus,
        n_alg,
        machines,
        loads,
        nx,
    };
    debug_assert_eq!(plant.slack, slack);

    let mut u = vec![0.0; plant.n()];
    for (m, init) in plant.machines.iter().zip(&inits) {
        let s = init.eq.states();
        u[m.offset..m.offset + s.len()].copy_from_slice(&s);
    }
    for b in 0..nb {
        if let Some(a) = plant.alg_of_bus[b] {
            let v = pf.phasor(b);
            u[nx + 2 * a] = v.re;
            u[nx + 2 * a + 1] = v.im;
        }
    }

    // stochastic and forced inputs
    let dt = sc.dt;
    let n_steps = (t_end / dt).round() as usize;
    let v_slack0 = pf.phasor(slack);
    let nz = &sc.noise;
    let knot_dt = 1.0 / nz.slack_noise_rate_hz;
    let n_knots = (t_end / knot_dt).ceil() as usize + 2;
    let mut rng = rng_stream(sc.seed, Stream::SlackNoise);
    let knots: Vec<(f64, f64)> = (0..n_knots)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            (nz.slack_v_std * a, nz.slack_theta_std * b)
        })
        .collect();
    let mut ou_rng = rng_stream(sc.seed, Stream::LoadNoise);
    let mut ou: Vec<(OuProcess, OuProcess)> = plant
        .loads
        .iter()
        .map(|_| (OuProcess::new(nz.ou_theta, nz.ou_sigma), OuProcess::new(nz.ou_theta, nz.ou_sigma)))
        .collect();

    let inputs_at = |step: usize, ou: &[(OuProcess, OuProcess)]| -> Inputs {
        let t = step as f64 * dt;
        let kf = t / knot_dt;
        let k = kf.floor() as usize;
        let w = kf - k as f64;
        let (dv, dth) = (
            knots[k].0 * (1.0 - w) + knots[k + 1].0 * w,
            knots[k].1 * (1.0 - w) + knots[k + 1].1 * w,
        );
        let v_slack = Complex64::from_polar(v_slack0.norm() * (1.0 + dv), v_slack0.arg() + dth);
        let mut tm: Vec<f64> = plant.machines.iter().map(|m| m.tm0).collect();
        let mut vref: Vec<f64> = plant.machines.iter().map(|m| m.vref0).collect();
        for f in &sc.forcings {
            let s = 1.0 + f.amplitude * (2.0 * PI * f.freq_hz * t).sin();
            match f.channel {
                ForcingChannel::Torque => tm[f.generator] *= s,
                ForcingChannel::AvrRef => vref[f.generator] *= s,
            }
        }
        Inputs {
            v_slack,
            load_scale: ou.iter().map(|(p, q)| (1.0 + p.value(), 1.0 + q.value())).collect(),
            tm,
            vref,
        }
    };

    let keep_from = (t_keep / dt).round().max(0.0) as usize;
    let n_keep = n_steps + 1 - keep_from.min(n_steps + 1);
    let ng = plant.machines.len();
    let mut signals: Vec<[Vec<f64>; 4]> = (0..ng).map(|_| std::array::from_fn(|_| Vec::with_capacity(n_keep))).collect();
    let mut coi = Vec::with_capacity(n_keep);
    let h_sum: f64 = plant.machines.iter().map(|m| m.h).sum();
    let mut last_angle: Vec<(f64, f64)> = inits.iter().map(|i| (i.eq.theta0, i.eq.phi0)).collect();

    let mut record = |u: &[f64], inp: &Inputs, last: &mut Vec<(f64, f64)>| {
        let (x, y) = u.split_at(nx);
        let mut c = 0.0;
        for (k, m) in plant.machines.iter().enumerate() {
            let v = plant.bus_voltage(m.bus, y, inp);
            let n = m.model.n_states();
            let xs = &x[m.offset..m.offset + n];
            let i = machine::current_phasor(m.model, &m.p, xs, v);
            let th = unwrap_near(v.arg(), last[k].0);
            let ph = unwrap_near(i.arg(), last[k].1);
            last[k] = (th, ph);
            signals[k][0].push(v.norm());
            signals[k][1].push(th);
            signals[k][2].push(i.norm());
            signals[k][3].push(ph);
            c += m.h * xs[DELTA];
        }
        coi.push(c / h_sum);
    };

    let mut inp = inputs_at(0, &ou);
    let mut f0 = vec![0.0; nx];
    plant.f(&u[..nx], &u[nx..], &inp, &mut f0);
    if keep_from == 0 {
        record(&u, &inp, &mut last_angle);
    }
    let mut jac_lu = plant.jacobian(&u, &f0, &u, &inp, dt).lu();
    let mut res = vec![0.0; plant.n()];
    for step in 1..=n_steps {
        for (p, q) in ou.iter_mut() {
            p.step(dt, &mut ou_rng);
            q.step(dt, &mut ou_rng);
        }
        let inp1 = inputs_at(step, &ou);
        let u0 = u.clone();
        let mut u1 = u.clone();
        let mut converged = false;
        for attempt in 0..2 {
            for _ in 0..NEWTON_MAX {
                plant.residual(&u0, &f0, &u1, &inp1, dt, &mut res);
                let r = res.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                if !r.is_finite() {
                    break;
                }
                if r < NEWTON_TOL {
                    converged = true;
                    break;
                }
                let Some(d) = jac_lu.solve(&DVector::from_column_slice(&res)) else { break };
                for (a, b) in u1.iter_mut().zip(d.iter()) {
                    *a -= b;
                }
            }
            if converged {
                break;
            }
            if attempt == 0 {
                u1 = u0.clone();
                jac_lu = plant.jacobian(&u0, &f0, &u0, &inp1, dt).lu();
            }
        }
        if !converged {
            return Err(SimError::IntegrationDiverged { t: step as f64 * dt });
        }
        u = u1;
        inp = inp1;
        plant.f(&u[..nx], &u[nx..], &inp, &mut f0);
        if step >= keep_from {
            record(&u, &inp, &mut last_angle);
        }
    }
    Ok((
        Trajectory {
            signals,
            coi,
            t0: keep_from as f64 * dt,
        },
        inits,
    ))
}

/// Blackman-windowed sinc low-pass taps, unit DC gain.
pub(crate) fn lowpass_taps(half: usize, cutoff_hz: f64, dt: f64) -> Vec<f64> {
    let n = 2 * half + 1;
    let wc = 2.0 * cutoff_hz * dt;
    let mut taps: Vec<f64> = (0..n)
        .map(|i| {
            let k = i as f64 - half as f64;
            let sinc = if k == 0.0 { wc } else { (PI * wc * k).sin() / (PI * k) };
            let x = i as f64 / (n - 1) as f64;
            let w = 0.42 - 0.5 * (TAU * x).cos() + 0.08 * (2.0 * TAU * x).cos();
            sinc * w
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Filter `x` with `taps` centred on each index in `at`; samples past either end
/// are held at the end values.
pub(crate) fn filter_at(x: &[f64], taps: &[f64], at: impl Iterator<Item = usize>) -> Vec<f64> {
    let half = taps.len() / 2;
    let last = x.len() as isize - 1;
    at.map(|c| {
        taps.iter()
            .enumerate()
            .map(|(j, t)| {
                let idx = (c as isize + j as isize - half as isize).clamp(0, last) as usize;
                t * x[idx]
            })
            .sum()
    })
    .collect()
}
