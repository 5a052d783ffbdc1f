//! The stage-1 and stage-2 schemes on any [`Smooth`] objective, for callers
//! with their own residual models (and for checking the schemes against closed
//! forms).

use nalgebra::DMatrix;

use super::stage1::levenberg;
use super::stage2::interior_point;
use super::{Smooth, SolverSettings};
use crate::error::SolverError;

#[derive(Clone, Debug)]
pub struct SmoothSolution {
    pub z: Vec<f64>,
    pub objective: f64,
    pub hessian: DMatrix<f64>,
    /// Gradient norm (smooth) or KKT residual (ℓ1).
    pub stationarity: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Damped Gauss–Newton (or Newton) with frozen-covariance refresh.
pub fn minimize_smooth<S: Smooth>(p: &S, z0: Vec<f64>, settings: &SolverSettings) -> Result<SmoothSolution, SolverError> {
    if z0.len() != p.dim() {
        return Err(SolverError::Config("start vector has the wrong length".into()));
    }
    let o = levenberg(p, z0, settings)?;
    Ok(SmoothSolution {
        z: o.z,
        objective: o.f,
        hessian: o.hess,
        stationarity: o.grad.norm(),
        iterations: o.iterations,
        converged: o.converged,
    })
}

/// `min f(z) + λ Σ |z_j|` over the last `dim − n_free` coordinates, by the
/// slack-variable interior point.
pub fn minimize_l1<S: Smooth>(
    p: &S,
    z0: Vec<f64>,
    lambda: f64,
    settings: &SolverSettings,
) -> Result<SmoothSolution, SolverError> {
    if z0.len() != p.dim() {
        return Err(SolverError::Config("start vector has the wrong length".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(SolverError::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let o = interior_point(p, z0, lambda, settings)?;
    Ok(SmoothSolution {
        z: o.z,
        objective: o.f,
        hessian: o.hess,
        stationarity: o.kkt,
        iterations: o.iterations,
        converged: o.converged,
    })
}
