//! Priors and the per-generator MAP problem for both estimation stages.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{GeneratorModel, ParamPrior};
use crate::error::SolverError;
use crate::spectra::{BandMask, SpectralDataset, DFT_CONSTANT_DEFAULT};

/// Diagonal Gaussian prior over the log-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self, SolverError> {
        let p = Self { mean, variance };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if self.mean.len() != self.variance.len() {
            return Err(SolverError::Config(format!(
                "prior has {} means but {} variances",
                self.mean.len(),
                self.variance.len()
            )));
        }
        if self.variance.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(SolverError::Config("prior variances must be positive".into()));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(SolverError::Config("prior means must be finite".into()));
        }
        Ok(())
    }

    /// Map a natural-unit prior `N(μ, σ²)` to log space by the delta method:
    /// mean `ln μ`, variance `σ² / μ²`.
    pub fn from_natural(prior: &ParamPrior) -> Result<Self, SolverError> {
        prior.validate()?;
        let mu = prior.mean.free_values();
        Self::new(
            mu.iter().map(|m| m.ln()).collect(),
            mu.iter()
                .zip(&prior.variance)
                .map(|(m, v)| v / (m * m))
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `(Θ − Θ̄)ᵀ Γ⁻¹ (Θ − Θ̄)` for a diagonal Γ.
pub fn prior_cost_gaussian(theta: &[f64], prior: &GaussianPrior) -> f64 {
    theta
        .iter()
        .zip(&prior.mean)
        .zip(&prior.variance)
        .map(|((t, m), v)| (t - m).powi(2) / v)
        .sum()
}

/// `λ ‖Θ_I‖₁`.
pub fn prior_cost_laplace(theta_i: &[f64], lambda: f64) -> f64 {
    lambda * theta_i.iter().map(|x| x.abs()).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Parameters only, FO bands excluded from the data.
    Stage1,
    /// Parameters and band-limited injections, all bins, L1 penalty via slacks.
    Stage2,
}

/// One generator's MAP problem. The decision vector is `[Θ_g; Θ_I; s]`, with the
/// injection and slack blocks present only in stage 2 (`4v` entries each, laid
/// out as `[I_Ir, I_Ii, I_φr, I_φi]` per injection bin).
#[derive(Clone, Debug)]
pub struct MapProblem {
    pub name: String,
    pub stage: Stage,
    pub model: GeneratorModel,
    pub spec: SpectralDataset,
    pub prior: GaussianPrior,
    pub lambda: f64,
    pub masks: Vec<BandMask>,
    /// Bins entering the residual, in ascending order.
    pub data_bins: Vec<usize>,
    /// Bins carrying injection variables (union of the masks), ascending.
    pub injection_bins: Vec<usize>,
    /// Multiplier `c` of the DFT noise variance.
    pub dft_constant: f64,
}

impl MapProblem {
    pub fn n_params(&self) -> usize {
        self.prior.dim()
    }

    /// Number of injection variables `4v` (zero in stage 1).
    pub fn n_injections(&self) -> usize {
        4 * self.injection_bins.len()
    }

    pub fn dim(&self) -> usize {
        match self.stage {
            Stage::Stage1 => self.n_params(),
            Stage::Stage2 => self.n_params() + 2 * self.n_injections(),
        }
    }

    /// Per-component spectral noise variances `[V, θ, I, φ]`.
    pub fn spectral_var(&self) -> [f64; 4] {
        self.spec.spectral_var(self.dft_constant)
    }

    /// Same problem in the other stage (masks, prior and λ kept).
    pub fn with_stage(&self, stage: Stage) -> Self {
        let (data_bins, injection_bins) = bin_sets(&self.spec, &self.masks, stage);
        Self {
            stage,
            data_bins,
            injection_bins,
            ..self.clone()
        }
    }

    pub fn with_prior(&self, prior: GaussianPrior) -> Self {
        Self {
            prior,
            ..self.clone()
        }
    }
}

fn bin_sets(spec: &SpectralDataset, masks: &[BandMask], stage: Stage) -> (Vec<usize>, Vec<usize>) {
    let mut band: Vec<usize> = masks.iter().flat_map(|m| m.bins.iter().copied()).collect();
    band.sort_unstable();
    band.dedup();
    match stage {
        Stage::Stage1 => (
            spec.non_dc_bins()
                .into_iter()
                .filter(|b| band.binary_search(b).is_err())
                .collect(),
            Vec::new(),
        ),
        Stage::Stage2 => (spec.non_dc_bins(), band),
    }
}

/// Settings shared by every generator's problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSettings {
    pub lambda: f64,
    pub dft_constant: f64,
}

impl Default for ProblemSettings {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            dft_constant: DFT_CONSTANT_DEFAULT,
        }
    }
}

pub fn assemble(
    name: &str,
    stage: Stage,
    model: GeneratorModel,
    spec: SpectralDataset,
    prior: GaussianPrior,
    masks: Vec<BandMask>,
    settings: &ProblemSettings,
) -> Result<MapProblem, SolverError> {
    prior.validate()?;
    let m = model.free_params().len();
    if prior.dim() != m {
        return Err(SolverError::Config(format!(
            "generator {name}: prior has {} entries, model has {m} free parameters",
            prior.dim()
        )));
    }
    if !(settings.lambda >= 0.0 && settings.lambda.is_finite()) {
        return Err(SolverError::Config(format!("lambda must be >= 0, got {}", settings.lambda)));
    }
    if !(settings.dft_constant > 0.0) {
        return Err(SolverError::Config("DFT noise constant must be positive".into()));
    }
    if spec.noise_var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(SolverError::Config(format!(
            "generator {name}: channel noise variances must be positive"
        )));
    }
    let nb = spec.grid.len();
    for mask in &masks {
        if mask.bins.iter().any(|&b| b == 0 || b >= nb) {
            return Err(SolverError::Config(format!(
                "generator {name}: band mask outside the non-DC grid"
            )));
        }
    }
    let (data_bins, injection_bins) = bin_sets(&spec, &masks, stage);
    if data_bins.is_empty() {
        return Err(SolverError::Config(format!("generator {name}: no data bins")));
    }
    Ok(MapProblem {
        name: name.to_string(),
        stage,
        model,
        spec,
        prior,
        lambda: settings.lambda,
        masks,
        data_bins,
        injection_bins,
        dft_constant: settings.dft_constant,
    })
}

/// Posterior after stage 1: mean `Θ_MAP1` and variances `diag(H⁻¹)`, where `H` is
/// the Hessian of the negative log posterior (half the Hessian of the stage-1
/// objective, which is `−2 log p` up to a constant).
pub fn posterior_update(theta_map1: &[f64], hessian: &DMatrix<f64>) -> Result<GaussianPrior, SolverError> {
    let m = theta_map1.len();
    if hessian.nrows() != m || hessian.ncols() != m {
        return Err(SolverError::Config("Hessian dimension mismatch".into()));
    }
    let sym = (hessian + hessian.transpose()) * 0.5;
    let ch = sym.cholesky().ok_or(SolverError::IndefiniteHessian)?;
    let inv = ch.inverse();
    let variance: Vec<f64> = (0..m).map(|i| inv[(i, i)]).collect();
    if variance.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(SolverError::IndefiniteHessian);
    }
    GaussianPrior::new(theta_map1.to_vec(), variance)
}
