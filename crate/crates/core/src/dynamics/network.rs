//! Algebraic transmission network: bus admittance matrix and AC power flow.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::DynamicsError;

const PF_MAX_ITER: usize = 30;
const PF_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    /// Infinite bus: fixed voltage magnitude and angle.
    Slack,
    /// Generator bus: scheduled active power and voltage magnitude.
    Pv,
    /// Load bus: scheduled active and reactive demand.
    Pq,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub name: String,
    pub kind: BusKind,
    /// Voltage magnitude set point (slack and PV buses), pu.
    #[serde(default = "one")]
    pub v: f64,
    /// Angle of the slack bus, rad.
    #[serde(default)]
    pub theta: f64,
    /// Scheduled generation at a PV bus, pu.
    #[serde(default)]
    pub p_gen: f64,
    #[serde(default)]
    pub p_load: f64,
    #[serde(default)]
    pub q_load: f64,
}

/// Series R + jX line with optional total line charging B.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
}

/// Solved bus voltages and net injections (generation minus load).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFlow {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub iterations: usize,
}

impl PowerFlow {
    pub fn phasor(&self, bus: usize) -> Complex64 {
        Complex64::from_polar(self.v[bus], self.theta[bus])
    }
}

impl Network {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let n = self.buses.len();
        let slacks = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        if slacks != 1 {
            return Err(DynamicsError::InvalidNetwork(format!(
                "expected exactly one slack bus, found {slacks}"
            )));
        }
        for (i, br) in self.branches.iter().enumerate() {
            if br.from >= n || br.to >= n || br.from == br.to {
                return Err(DynamicsError::InvalidNetwork(format!(
                    "branch {i} has invalid endpoints {}-{}",
                    br.from, br.to
                )));
            }
            if br.r.hypot(br.x) <= 0.0 || !br.r.is_finite() || !br.x.is_finite() {
                return Err(DynamicsError::InvalidNetwork(format!(
                    "branch {i} has zero or non-finite impedance"
                )));
            }
        }
        for b in &self.buses {
            if !(b.v > 0.0) {
                return Err(DynamicsError::InvalidNetwork(format!(
                    "bus {} has non-positive voltage set point",
                    b.name
                )));
            }
        }
        // every bus must be connected to the slack
        let mut seen = vec![false; n];
        let mut stack = vec![self.slack()];
        while let Some(k) = stack.pop() {
            if std::mem::replace(&mut seen[k], true) {
                continue;
            }
            for br in &self.branches {
                if br.from == k && !seen[br.to] {
                    stack.push(br.to);
                } else if br.to == k && !seen[br.from] {
                    stack.push(br.from);
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(DynamicsError::InvalidNetwork(format!(
                "bus {} is islanded",
                self.buses[i].name
            )));
        }
        Ok(())
    }

    pub fn slack(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .unwrap_or(0)
    }

    pub fn ybus(&self) -> DMatrix<Complex64> {
        let n = self.n_buses();
        let mut y = DMatrix::zeros(n, n);
        for br in &self.branches {
            let ys = Complex64::new(br.r, br.x).inv();
            let sh = Complex64::new(0.0, br.b / 2.0);
            y[(br.from, br.from)] += ys + sh;
            y[(br.to, br.to)] += ys + sh;
            y[(br.from, br.to)] -= ys;
            y[(br.to, br.from)] -= ys;
        }
        y
    }

    /// Polar Newton–Raphson power flow.
    pub fn power_flow(&self) -> Result<PowerFlow, DynamicsError> {
        self.validate()?;
        let n = self.n_buses();
        let y = self.ybus();
        let pv_pq: Vec<usize> = (0..n)
            .filter(|&i| self.buses[i].kind != BusKind::Slack)
            .collect();
        let pq: Vec<usize> = (0..n)
            .filter(|&i| self.buses[i].kind == BusKind::Pq)
            .collect();
        let p_sched: Vec<f64> = self.buses.iter().map(|b| b.p_gen - b.p_load).collect();
        let q_sched: Vec<f64> = self.buses.iter().map(|b| -b.q_load).collect();

        let mut vm: Vec<f64> = self
            .buses
            .iter()
            .map(|b| if b.kind == BusKind::Pq { 1.0 } else { b.v })
            .collect();
        let s = self.slack();
        let mut va = vec![self.buses[s].theta; n];

        let (np, nq) = (pv_pq.len(), pq.len());
        let mut mismatch = f64::INFINITY;
        for it in 0..=PF_MAX_ITER {
            let v: DVector<Complex64> =
                DVector::from_iterator(n, (0..n).map(|i| Complex64::from_polar(vm[i], va[i])));
            let ibus = &y * &v;
            let sbus: Vec<Complex64> = (0..n).map(|i| v[i] * ibus[i].conj()).collect();
            let mut f = DVector::zeros(np + nq);
            for (r, &i) in pv_pq.iter().enumerate() {
                f[r] = sbus[i].re - p_sched[i];
            }
            for (r, &i) in pq.iter().enumerate() {
                f[np + r] = sbus[i].im - q_sched[i];
            }
            mismatch = f.amax();
            if mismatch < PF_TOL {
                return Ok(PowerFlow {
                    v: vm,
                    theta: va,
                    p: sbus.iter().map(|z| z.re).collect(),
                    q: sbus.iter().map(|z| z.im).collect(),
                    iterations: it,
                });
            }
            if it == PF_MAX_ITER {
                break;
            }
            // dS/dVa = j diag(V) conj(diag(I) - Y diag(V))
            // dS/dVm = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
            let vn: Vec<Complex64> = (0..n).map(|i| v[i] / vm[i]).collect();
            let ds = |i: usize, k: usize, polar_mag: bool| -> Complex64 {
                if polar_mag {
                    let mut z = v[i] * (y[(i, k)] * vn[k]).conj();
                    if i == k {
                        z += ibus[i].conj() * vn[i];
                    }
                    z
                } else {
                    let mut t = -(y[(i, k)] * v[k]);
                    if i == k {
                        t += ibus[i];
                    }
                    Complex64::i() * v[i] * t.conj()
                }
            };
            let mut jac = DMatrix::zeros(np + nq, np + nq);
            for (r, &i) in pv_pq.iter().enumerate() {
                for (c, &k) in pv_pq.iter().enumerate() {
                    jac[(r, c)] = ds(i, k, false).re;
                }
                for (c, &k) in pq.iter().enumerate() {
                    jac[(r, np + c)] = ds(i, k, true).re;
                }
            }
            for (r, &i) in pq.iter().enumerate() {
                for (c, &k) in pv_pq.iter().enumerate() {
                    jac[(np + r, c)] = ds(i, k, false).im;
                }
                for (c, &k) in pq.iter().enumerate() {
                    jac[(np + r, np + c)] = ds(i, k, true).im;
                }
            }
            let dx = jac.lu().solve(&f).ok_or(DynamicsError::PowerFlowDiverged {
                iterations: it,
                mismatch,
            })?;
            for (r, &i) in pv_pq.iter().enumerate() {
                va[i] -= dx[r];
            }
            for (r, &i) in pq.iter().enumerate() {
                vm[i] -= dx[np + r];
            }
        }
        Err(DynamicsError::PowerFlowDiverged {
            iterations: PF_MAX_ITER,
            mismatch,
        })
    }
}
