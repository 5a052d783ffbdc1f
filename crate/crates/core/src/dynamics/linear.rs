use nalgebra::DMatrix;
use num_dual::{Dual64, HyperDual64};
use serde::{Deserialize, Serialize};

use super::equilibrium::{self, EquilibriumPoint, TerminalCondition};
use super::machine::{self, Scalar, OMEGA_S};
use super::params::{GeneratorParams, ModelOrder, ParamKind, ParamSet};
use crate::error::DynamicsError;

/// Small-signal model `dx = A x + B [V; θ]`, `[I; φ] = C x + D [V; θ]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl LinearModel {
    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    /// Static model with no states.
    pub fn feedthrough(d: [[f64; 2]; 2]) -> Self {
        Self {
            a: DMatrix::zeros(0, 0),
            b: DMatrix::zeros(0, 2),
            c: DMatrix::zeros(2, 0),
            d: DMatrix::from_row_slice(2, 2, &[d[0][0], d[0][1], d[1][0], d[1][1]]),
        }
    }
}

/// Row-major state-space matrices over a generic scalar.
#[derive(Clone, Debug)]
pub(crate) struct LinMats<T> {
    pub n: usize,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: [T; 4],
}

impl LinMats<f64> {
    pub fn to_model(&self) -> LinearModel {
        let n = self.n;
        LinearModel {
            a: DMatrix::from_row_slice(n, n, &self.a),
            b: DMatrix::from_row_slice(n, 2, &self.b),
            c: DMatrix::from_row_slice(2, n, &self.c),
            d: DMatrix::from_row_slice(2, 2, &self.d),
        }
    }
}

impl<T: Scalar> LinMats<T> {
    fn map<U>(&self, f: impl Fn(&T) -> U) -> LinMats<U> {
        LinMats {
            n: self.n,
            a: self.a.iter().map(&f).collect(),
            b: self.b.iter().map(&f).collect(),
            c: self.c.iter().map(&f).collect(),
            d: [f(&self.d[0]), f(&self.d[1]), f(&self.d[2]), f(&self.d[3])],
        }
    }
}

/// Jacobians of the machine ODE at an internal state `(δ, E)`; algebraic stator
/// variables are eliminated in closed form.
pub(crate) fn linear_mats<T: Scalar>(
    model: ModelOrder,
    p: &ParamSet<T>,
    delta: T,
    e: T,
    v: T,
    theta: T,
) -> Result<LinMats<T>, DynamicsError> {
    let xqq = machine::q_reactance(model, p);
    if p.xdp.re() <= 0.0 || xqq.re() <= 0.0 {
        return Err(DynamicsError::SingularAlgebraicBlock(
            "stator reactances must be positive".into(),
        ));
    }
    let (s, c) = (delta - theta).sin_cos();
    let zero = T::from(0.0);
    let one = T::from(1.0);
    let (id, iq) = machine::dq_currents(model, p, delta, e, v, theta);
    let i2 = id * id + iq * iq;
    if i2.re() < 1e-18 {
        return Err(DynamicsError::DegenerateOperatingPoint(
            "terminal current is zero; current phase is undefined".into(),
        ));
    }
    let imag = i2.sqrt();

    // stator current partials; θ partials are the negated δ partials
    let id_d = v * s / p.xdp;
    let id_v = -c / p.xdp;
    let id_e = p.xdp.recip();
    let iq_d = v * c / xqq;
    let iq_v = s / xqq;

    let pe_d = v * c * id + v * s * id_d - v * s * iq + v * c * iq_d;
    let pe_v = s * id + v * s * id_v + c * iq + v * c * iq_v;
    let pe_e = v * s * id_e;

    let mag = |did: T, diq: T| (id * did + iq * diq) / imag;
    let ang = |did: T, diq: T| (id * diq - iq * did) / i2;

    let two_h = p.h * 2.0;
    let n = model.n_states();
    let mut a = vec![zero; n * n];
    let mut b = vec![zero; n * 2];
    let mut cm = vec![zero; 2 * n];

    a[1] = T::from(OMEGA_S);
    a[n] = -pe_d / two_h;
    a[n + 1] = -p.d / two_h;
    b[2] = -pe_v / two_h;
    b[3] = pe_d / two_h;

    cm[0] = mag(id_d, iq_d);
    cm[n] = one + ang(id_d, iq_d);

    if model == ModelOrder::FluxDecay3 {
        let dx = p.xd - p.xdp;
        a[n + 2] = -pe_e / two_h;
        a[2 * n] = -(dx * id_d) / p.td0p;
        a[2 * n + 2] = (-one - dx * id_e) / p.td0p;
        a[2 * n + 3] = p.td0p.recip();
        a[3 * n + 3] = -p.ta.recip();
        b[4] = -(dx * id_v) / p.td0p;
        b[5] = dx * id_d / p.td0p;
        b[6] = -p.ka / p.ta;
        cm[2] = mag(id_e, zero);
        cm[n + 2] = ang(id_e, zero);
    }

    let d = [
        mag(id_v, iq_v),
        -mag(id_d, iq_d),
        ang(id_v, iq_v),
        -ang(id_d, iq_d),
    ];
    Ok(LinMats { n, a, b, c: cm, d })
}

/// Jacobians of the machine model at an equilibrium.
pub fn linearize(
    params: &GeneratorParams,
    eq: &EquilibriumPoint,
) -> Result<LinearModel, DynamicsError> {
    params.validate()?;
    if eq.model != params.model {
        return Err(DynamicsError::InvalidParams(
            "equilibrium and parameters disagree on model order".into(),
        ));
    }
    let p = ParamSet::<f64>::lift(params);
    let e = match params.model {
        ModelOrder::Classical2 => params.e_prime,
        ModelOrder::FluxDecay3 => eq.e0,
    };
    Ok(linear_mats(params.model, &p, eq.delta0, e, eq.v0, eq.theta0)?.to_model())
}

/// Parameterization of one generator's small-signal model by the logarithms of its
/// free parameters, around a fixed measured terminal condition.
#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub base: GeneratorParams,
    pub terminal: TerminalCondition,
}

/// State-space matrices and their derivatives with respect to log-parameters.
#[derive(Clone, Debug)]
pub struct ModelJet {
    pub(crate) value: LinMats<f64>,
    /// `first[k]` = ∂(A,B,C,D)/∂log θ_k.
    pub(crate) first: Vec<LinMats<f64>>,
    /// `second[k][l]` = ∂²/∂log θ_k ∂log θ_l (present on request).
    pub(crate) second: Option<Vec<Vec<LinMats<f64>>>>,
}

impl ModelJet {
    pub(crate) fn value_only(value: LinMats<f64>) -> Self {
        Self {
            value,
            first: Vec::new(),
            second: None,
        }
    }

    pub fn model(&self) -> LinearModel {
        self.value.to_model()
    }
    pub fn n_params(&self) -> usize {
        self.first.len()
    }
}

impl GeneratorModel {
    pub fn new(base: GeneratorParams, terminal: TerminalCondition) -> Self {
        Self { base, terminal }
    }

    pub fn free_params(&self) -> &'static [ParamKind] {
        self.base.free_params()
    }

    pub fn log_params(&self) -> Vec<f64> {
        self.base.free_values().iter().map(|v| v.ln()).collect()
    }

    /// Natural-unit parameters for a log-parameter vector.
    pub fn params_at(&self, log_theta: &[f64]) -> GeneratorParams {
        let mut p = self.base.clone();
        for (&k, &t) in self.free_params().iter().zip(log_theta) {
            p.set(k, t.exp());
        }
        p
    }

    pub(crate) fn mats<T: Scalar>(&self, log_theta: &[T]) -> Result<LinMats<T>, DynamicsError> {
        let model = self.base.model;
        let mut p = ParamSet::<T>::lift(&self.base);
        for (&k, t) in self.free_params().iter().zip(log_theta) {
            p.set(k, t.exp());
        }
        let sol = equilibrium::solve_internal(model, &p, &self.terminal)?;
        linear_mats(
            model,
            &p,
            sol.delta,
            sol.e,
            T::from(self.terminal.v),
            T::from(self.terminal.theta),
        )
    }

    pub fn linear_model(&self, log_theta: &[f64]) -> Result<LinearModel, DynamicsError> {
        Ok(self.mats(log_theta)?.to_model())
    }

    /// Model matrices plus exact first (and optionally second) derivatives with
    /// respect to the log-parameters, by forward-mode dual numbers.
    pub fn jet(&self, log_theta: &[f64], second: bool) -> Result<ModelJet, DynamicsError> {
        let m = log_theta.len();
        let value = self.mats(log_theta)?;
        let mut first = Vec::with_capacity(m);
        for k in 0..m {
            let th: Vec<Dual64> = log_theta
                .iter()
                .enumerate()
                .map(|(i, &t)| Dual64::new(t, if i == k { 1.0 } else { 0.0 }))
                .collect();
            first.push(self.mats(&th)?.map(|x| x.eps));
        }
        let second = if second {
            let mut out: Vec<Vec<LinMats<f64>>> = vec![Vec::with_capacity(m); m];
            for k in 0..m {
                for l in 0..m {
                    if l < k {
                        let sym: LinMats<f64> = out[l][k].clone();
                        out[k].push(sym);
                        continue;
                    }
                    let th: Vec<HyperDual64> = log_theta
                        .iter()
                        .enumerate()
                        .map(|(i, &t)| {
                            HyperDual64::new(
                                t,
                                if i == k { 1.0 } else { 0.0 },
                                if i == l { 1.0 } else { 0.0 },
                                0.0,
                            )
                        })
                        .collect();
                    out[k].push(self.mats(&th)?.map(|x| x.eps1eps2));
                }
            }
            Some(out)
        } else {
            None
        };
        Ok(ModelJet {
            value,
            first,
            second,
        })
    }
}
