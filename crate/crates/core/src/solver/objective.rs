//! Frozen-covariance objective `‖Θ_g − Θ̄_g‖²_{Γ_g⁻¹} + Rᵀ Γ̄⁻¹ R (+ λ 1ᵀs)` with
//! analytic derivatives.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector4};
use num_complex::Complex64;

use super::kernel;
use crate::bayes::{MapProblem, Stage};
use crate::dynamics::linear::ModelJet;
use crate::dynamics::Frf;
use crate::error::SolverError;
use crate::likelihood::{covariance_block, NoiseCovariance};

/// `Γ_L` evaluated at one parameter point and held fixed for an iteration.
#[derive(Clone, Debug)]
pub struct FrozenCovariance {
    pub cov: NoiseCovariance,
    pub(crate) inv: Vec<Matrix4<f64>>,
}

impl FrozenCovariance {
    pub fn from_covariance(cov: NoiseCovariance) -> Result<Self, SolverError> {
        let inv = cov
            .blocks
            .iter()
            .enumerate()
            .map(|(b, blk)| {
                blk.cholesky()
                    .map(|c| c.inverse())
                    .ok_or(SolverError::Likelihood(
                        crate::error::LikelihoodError::NotPositiveDefinite(b),
                    ))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { cov, inv })
    }

    /// Median of the diagonal of `Γ̄_L`.
    pub fn median_diagonal(&self) -> f64 {
        let mut d = self.cov.diagonal();
        d.sort_by(f64::total_cmp);
        d.get(d.len() / 2).copied().unwrap_or(1.0)
    }
}

/// FRF of the problem's model at `theta_g`, tabulated on the data bins only
/// (entries on other bins are left at zero).
pub fn frf_at(problem: &MapProblem, theta_g: &[f64]) -> Result<Frf, SolverError> {
    let lin = problem.model.mats::<f64>(theta_g)?;
    let mut y = vec![Matrix2::zeros(); problem.spec.grid.len()];
    for &w in &problem.data_bins {
        let m = kernel::y_matrix(&lin, w, problem.spec.grid[w])?;
        y[w] = Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1]);
    }
    Ok(Frf {
        grid: problem.spec.grid.clone(),
        y,
    })
}

/// Step 1 of the frozen-covariance iteration: `Γ̄_L = Γ_L |_{Θ_g}` on the data bins.
pub fn freeze(problem: &MapProblem, theta_g: &[f64]) -> Result<FrozenCovariance, SolverError> {
    let frf = frf_at(problem, theta_g)?;
    let svar = problem.spectral_var();
    FrozenCovariance::from_covariance(NoiseCovariance {
        bins: problem.data_bins.clone(),
        blocks: problem
            .data_bins
            .iter()
            .map(|&w| covariance_block(&frf.y[w], svar))
            .collect(),
    })
}

/// Derivative order requested from [`evaluate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    Value,
    Gradient,
    /// Gradient plus the Gauss–Newton Hessian (second-derivative term dropped).
    GaussNewton,
    /// Gradient plus the exact Hessian.
    Full,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub f: f64,
    pub grad: Option<DVector<f64>>,
    pub hess: Option<DMatrix<f64>>,
}

fn split4(z: [Complex64; 2]) -> Vector4<f64> {
    Vector4::new(z[0].re, z[0].im, z[1].re, z[1].im)
}

/// Objective and derivatives over the problem's full decision vector.
pub fn evaluate(
    problem: &MapProblem,
    z: &[f64],
    frozen: &FrozenCovariance,
    order: Order,
) -> Result<Evaluation, SolverError> {
    let m = problem.n_params();
    let ni = match problem.stage {
        Stage::Stage1 => 0,
        Stage::Stage2 => problem.n_injections(),
    };
    let dim = problem.dim();
    if z.len() != dim {
        return Err(SolverError::Config(format!(
            "decision vector has length {}, expected {dim}",
            z.len()
        )));
    }
    if frozen.cov.bins != problem.data_bins {
        return Err(SolverError::Config("frozen covariance built on other bins".into()));
    }
    let theta = &z[..m];
    let want_grad = order != Order::Value;
    let want_hess = matches!(order, Order::GaussNewton | Order::Full);
    let jet = if want_grad {
        problem.model.jet(theta, order == Order::Full)?
    } else {
        ModelJet::value_only(problem.model.mats::<f64>(theta)?)
    };

    let mut f = 0.0;
    let mut g = DVector::zeros(if want_grad { dim } else { 0 });
    let mut h = DMatrix::zeros(if want_hess { dim } else { 0 }, if want_hess { dim } else { 0 });

    // prior
    for k in 0..m {
        let d = theta[k] - problem.prior.mean[k];
        let v = problem.prior.variance[k];
        f += d * d / v;
        if want_grad {
            g[k] += 2.0 * d / v;
        }
        if want_hess {
            h[(k, k)] += 2.0 / v;
        }
    }

    let spec = &problem.spec;
    let mut jac = nalgebra::OMatrix::<f64, nalgebra::U4, nalgebra::Dyn>::zeros(m);
    let mut inj_pos = 0usize;
    for (b, &w) in problem.data_bins.iter().enumerate() {
        let u = [spec.v[w], spec.theta[w]];
        let resp = kernel::bin_response(&jet, w, spec.grid[w], u)?;
        let obs = [spec.i[w], spec.phi[w]];
        let mut r = split4([obs[0] - resp.yu[0], obs[1] - resp.yu[1]]);
        // injections are only defined on their bins, which are a subset of the data bins
        let inj = if inj_pos < problem.injection_bins.len() && problem.injection_bins[inj_pos] == w {
            inj_pos += 1;
            Some(m + 4 * (inj_pos - 1))
        } else {
            None
        };
        if let Some(o) = inj {
            r -= Vector4::new(z[o], z[o + 1], z[o + 2], z[o + 3]);
        }
        let gi = &frozen.inv[b];
        let wv = gi * r;
        f += r.dot(&wv);
        if !want_grad {
            continue;
        }
        for k in 0..m {
            jac.set_column(k, &(-split4(resp.dyu[k])));
        }
        let gt = jac.transpose() * wv * 2.0;
        for k in 0..m {
            g[k] += gt[k];
        }
        if let Some(o) = inj {
            for c in 0..4 {
                g[o + c] -= 2.0 * wv[c];
            }
        }
        if !want_hess {
            continue;
        }
        let gj = gi * &jac;
        let htt = jac.transpose() * &gj * 2.0;
        for k in 0..m {
            for l in 0..m {
                h[(k, l)] += htt[(k, l)];
            }
        }
        if let Some(d2) = resp.d2yu.as_ref() {
            for k in 0..m {
                for l in 0..m {
                    h[(k, l)] += 2.0 * (-split4(d2[k][l])).dot(&wv);
                }
            }
        }
        if let Some(o) = inj {
            for c in 0..4 {
                for k in 0..m {
                    h[(k, o + c)] -= 2.0 * gj[(c, k)];
                    h[(o + c, k)] -= 2.0 * gj[(c, k)];
                }
                for c2 in 0..4 {
                    h[(o + c, o + c2)] += 2.0 * gi[(c, c2)];
                }
            }
        }
    }
    if problem.stage == Stage::Stage2 {
        let s = &z[m + ni..];
        f += problem.lambda * s.iter().sum::<f64>();
        if want_grad {
            for j in 0..ni {
                g[m + ni + j] = problem.lambda;
            }
        }
    }
    Ok(Evaluation {
        f,
        grad: want_grad.then_some(g),
        hess: want_hess.then_some(h),
    })
}

/// `(f, ∇f)` with the covariance held at `frozen`.
pub fn objective_gradient(
    problem: &MapProblem,
    z: &[f64],
    frozen: &FrozenCovariance,
) -> Result<(f64, DVector<f64>), SolverError> {
    let e = evaluate(problem, z, frozen, Order::Gradient)?;
    Ok((e.f, e.grad.unwrap_or_default()))
}

/// Hessian of the frozen-covariance objective; `full = false` drops the
/// second-derivative residual term (Gauss–Newton).
pub fn hessian(
    problem: &MapProblem,
    z: &[f64],
    frozen: &FrozenCovariance,
    full: bool,
) -> Result<DMatrix<f64>, SolverError> {
    let order = if full { Order::Full } else { Order::GaussNewton };
    Ok(evaluate(problem, z, frozen, order)?.hess.unwrap_or_default())
}
