use serde::{Deserialize, Serialize};

use crate::error::DynamicsError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelOrder {
    /// Swing equation behind a constant EMF `E'` (states δ, ω).
    #[serde(rename = "classical2")]
    Classical2,
    /// One-axis flux-decay machine with a first-order AVR (states δ, ω, E_q', E_fd).
    #[serde(rename = "fluxdecay3")]
    FluxDecay3,
}

impl ModelOrder {
    pub fn n_states(self) -> usize {
        match self {
            ModelOrder::Classical2 => 2,
            ModelOrder::FluxDecay3 => 4,
        }
    }

    /// Parameters estimated for this model order, in decision-vector order.
    pub fn free_params(self) -> &'static [ParamKind] {
        use ParamKind::*;
        match self {
            ModelOrder::Classical2 => &[H, D, XdPrime, EPrime],
            ModelOrder::FluxDecay3 => &[H, D, Xd, XdPrime, Xq, Td0Prime, Ka, Ta],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    H,
    D,
    Xd,
    XdPrime,
    Xq,
    Td0Prime,
    EPrime,
    Ka,
    Ta,
}

impl ParamKind {
    pub fn label(self) -> &'static str {
        match self {
            ParamKind::H => "H",
            ParamKind::D => "D",
            ParamKind::Xd => "Xd",
            ParamKind::XdPrime => "Xd'",
            ParamKind::Xq => "Xq",
            ParamKind::Td0Prime => "Td0'",
            ParamKind::EPrime => "E'",
            ParamKind::Ka => "KA",
            ParamKind::Ta => "TA",
        }
    }
}

/// Dynamic constants of one machine and its exciter, in per unit on the system base.
///
/// Fields that a model order does not use are ignored by that model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub model: ModelOrder,
    /// Inertia constant (s).
    pub h: f64,
    /// Damping (pu torque per pu speed).
    pub d: f64,
    #[serde(default)]
    pub xd: f64,
    pub xd_prime: f64,
    #[serde(default)]
    pub xq: f64,
    /// Open-circuit transient time constant (s).
    #[serde(default)]
    pub td0_prime: f64,
    /// Internal EMF magnitude, classical model only.
    #[serde(default)]
    pub e_prime: f64,
    #[serde(default)]
    pub ka: f64,
    /// AVR time constant (s).
    #[serde(default)]
    pub ta: f64,
}

impl GeneratorParams {
    pub fn get(&self, kind: ParamKind) -> f64 {
        match kind {
            ParamKind::H => self.h,
            ParamKind::D => self.d,
            ParamKind::Xd => self.xd,
            ParamKind::XdPrime => self.xd_prime,
            ParamKind::Xq => self.xq,
            ParamKind::Td0Prime => self.td0_prime,
            ParamKind::EPrime => self.e_prime,
            ParamKind::Ka => self.ka,
            ParamKind::Ta => self.ta,
        }
    }

    pub fn set(&mut self, kind: ParamKind, value: f64) {
        match kind {
            ParamKind::H => self.h = value,
            ParamKind::D => self.d = value,
            ParamKind::Xd => self.xd = value,
            ParamKind::XdPrime => self.xd_prime = value,
            ParamKind::Xq => self.xq = value,
            ParamKind::Td0Prime => self.td0_prime = value,
            ParamKind::EPrime => self.e_prime = value,
            ParamKind::Ka => self.ka = value,
            ParamKind::Ta => self.ta = value,
        }
    }

    pub fn free_params(&self) -> &'static [ParamKind] {
        self.model.free_params()
    }

    pub fn free_values(&self) -> Vec<f64> {
        self.free_params().iter().map(|&k| self.get(k)).collect()
    }

    /// Every free parameter finite and strictly positive (required by the log-space
    /// parameterization). Priors only need to pass this check.
    pub fn validate(&self) -> Result<(), DynamicsError> {
        for &k in self.free_params() {
            let v = self.get(k);
            if !v.is_finite() || v <= 0.0 {
                return Err(DynamicsError::InvalidParams(format!(
                    "{} must be positive and finite, got {v}",
                    k.label()
                )));
            }
        }
        Ok(())
    }

    /// Positivity plus the machine-physics ordering `Xd >= Xd' > 0`.
    pub fn validate_physical(&self) -> Result<(), DynamicsError> {
        self.validate()?;
        if self.model == ModelOrder::FluxDecay3 && self.xd < self.xd_prime {
            return Err(DynamicsError::InvalidParams(format!(
                "Xd ({}) must not be smaller than Xd' ({})",
                self.xd, self.xd_prime
            )));
        }
        Ok(())
    }
}

/// Per-parameter Gaussian prior in natural units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamPrior {
    pub mean: GeneratorParams,
    /// Variances for the free parameters, keyed by the same order as `mean.free_params()`.
    pub variance: Vec<f64>,
}

impl ParamPrior {
    /// Prior with standard deviation `rel_std * mean` on every free parameter.
    pub fn relative(mean: GeneratorParams, rel_std: f64) -> Self {
        let variance = mean
            .free_values()
            .iter()
            .map(|v| (rel_std * v).powi(2))
            .collect();
        Self { mean, variance }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        self.mean.validate()?;
        let m = self.mean.free_params().len();
        if self.variance.len() != m {
            return Err(DynamicsError::InvalidParams(format!(
                "expected {m} prior variances, got {}",
                self.variance.len()
            )));
        }
        if self.variance.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(DynamicsError::InvalidParams(
                "prior variances must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Machine constants lifted into a generic scalar so derivatives can ride along.
#[derive(Clone, Debug)]
pub(crate) struct ParamSet<T> {
    pub h: T,
    pub d: T,
    pub xd: T,
    pub xdp: T,
    pub xq: T,
    pub td0p: T,
    pub ep: T,
    pub ka: T,
    pub ta: T,
}

impl<T: From<f64> + Clone> ParamSet<T> {
    pub fn lift(p: &GeneratorParams) -> Self {
        Self {
            h: p.h.into(),
            d: p.d.into(),
            xd: p.xd.into(),
            xdp: p.xd_prime.into(),
            xq: p.xq.into(),
            td0p: p.td0_prime.into(),
            ep: p.e_prime.into(),
            ka: p.ka.into(),
            ta: p.ta.into(),
        }
    }

    pub fn set(&mut self, kind: ParamKind, v: T) {
        match kind {
            ParamKind::H => self.h = v,
            ParamKind::D => self.d = v,
            ParamKind::Xd => self.xd = v,
            ParamKind::XdPrime => self.xdp = v,
            ParamKind::Xq => self.xq = v,
            ParamKind::Td0Prime => self.td0p = v,
            ParamKind::EPrime => self.ep = v,
            ParamKind::Ka => self.ka = v,
            ParamKind::Ta => self.ta = v,
        }
    }
}
