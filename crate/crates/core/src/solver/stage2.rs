//! Stage 2: primal log-barrier interior point on `(Θ_g, Θ_I, s)` with the
//! box `−s ≤ Θ_I ≤ s`. The slack block is eliminated coordinate by coordinate.

use nalgebra::{DMatrix, DVector};

use super::stage1::levenberg;
use super::{symmetrize, Descent, Evaluation, MapSolution, Order, Smooth, SmoothProblem, SolverSettings};
use crate::bayes::{MapProblem, Stage};
use crate::error::SolverError;
use crate::likelihood::InjectionVariables;

pub(crate) struct IpOutcome {
    pub z: Vec<f64>,
    pub f: f64,
    pub hess: DMatrix<f64>,
    pub kkt: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<Descent>,
}

fn barrier(f: f64, x: &[f64], s: &[f64], lambda: f64, mu: f64) -> f64 {
    let mut v = f;
    for (&xj, &sj) in x.iter().zip(s) {
        let (a, b) = (sj - xj, sj + xj);
        if a <= 0.0 || b <= 0.0 {
            return f64::INFINITY;
        }
        v += lambda * sj - mu * (a.ln() + b.ln());
    }
    v
}

/// Largest step in `(0, 1]` keeping `s ± x` above `(1 − τ)` of their current values.
fn max_step(x: &[f64], s: &[f64], dx: &[f64], ds: &[f64], tau: f64) -> f64 {
    let mut alpha: f64 = 1.0;
    for j in 0..x.len() {
        for (c, dc) in [(s[j] - x[j], ds[j] - dx[j]), (s[j] + x[j], ds[j] + dx[j])] {
            if dc < 0.0 {
                alpha = alpha.min(-tau * c / dc);
            }
        }
    }
    alpha
}

/// Subgradient optimality residual of `f + λ‖x‖₁`; `active[j]` marks `x_j ≠ 0`.
pub(crate) fn kkt_residual(grad: &DVector<f64>, n_free: usize, x: &[f64], active: &[bool], lambda: f64) -> f64 {
    let mut r = grad.rows(0, n_free).amax();
    for (j, &xj) in x.iter().enumerate() {
        let gj = grad[n_free + j];
        let e = if active[j] {
            (gj + lambda * xj.signum()).abs()
        } else {
            (gj.abs() - lambda).max(0.0)
        };
        r = r.max(e);
    }
    r
}

/// Newton steps on the smooth problem restricted to the support of `x` with
/// signs fixed, zeroing the rest. Kept only if the KKT residual improves.
fn polish<S: Smooth>(
    p: &S,
    z: Vec<f64>,
    active: Vec<bool>,
    lambda: f64,
    frozen: &S::Frozen,
    order: Order,
) -> Result<(Vec<f64>, Evaluation, f64), SolverError> {
    let nf = p.n_free();
    let e0 = p.eval(&z, frozen, order)?;
    let k0 = kkt_residual(e0.grad.as_ref().unwrap(), nf, &z[nf..], &active, lambda);
    let idx: Vec<usize> = (0..p.dim()).filter(|&i| i < nf || active[i - nf]).collect();
    let sign: Vec<f64> = z[nf..].iter().map(|x| x.signum()).collect();
    let mut zc = z.clone();
    for (j, a) in active.iter().enumerate() {
        if !a {
            zc[nf + j] = 0.0;
        }
    }
    let mut best = (z, e0, k0);
    for _ in 0..8 {
        // undamped steps can leave the admissible region; keep what we have
        let Ok(e) = p.eval(&zc, frozen, order) else { break };
        let g = e.grad.as_ref().unwrap();
        let k = kkt_residual(g, nf, &zc[nf..], &active, lambda);
        let signs_ok = (0..active.len()).all(|j| !active[j] || zc[nf + j].signum() == sign[j]);
        if signs_ok && k <= best.2 {
            best = (zc.clone(), e.clone(), k);
        }
        let h = e.hess.as_ref().unwrap();
        let n = idx.len();
        let hr = DMatrix::from_fn(n, n, |a, b| h[(idx[a], idx[b])]);
        let gr = DVector::from_fn(n, |a, _| {
            let i = idx[a];
            if i < nf {
                g[i]
            } else {
                g[i] + lambda * sign[i - nf]
            }
        });
        let Some(c) = symmetrize(&hr).cholesky() else { break };
        let d = c.solve(&gr);
        for (a, &i) in idx.iter().enumerate() {
            zc[i] -= d[a];
        }
        if d.amax() < 1e-15 {
            break;
        }
    }
    Ok(best)
}

pub(crate) fn interior_point<S: Smooth>(
    p: &S,
    z0: Vec<f64>,
    lambda: f64,
    settings: &SolverSettings,
) -> Result<IpOutcome, SolverError> {
    settings.validate()?;
    let order = settings.order();
    let n = p.dim();
    let nf = p.n_free();
    let nx = n - nf;
    let mut z = z0;
    let mut s: Vec<f64> = z[nf..].iter().map(|x| x.abs() + 1.0).collect();
    let mut mu = settings.mu0;
    let mut iterations = 0;
    let mut history = Vec::new();
    let mut converged = true;

    loop {
        let frozen = p.freeze(&z)?;
        let mut level_done = false;
        for _ in 0..settings.max_inner {
            if iterations >= settings.max_iter * settings.max_inner {
                break;
            }
            let e = p.eval(&z, &frozen, order)?;
            let g = e.grad.unwrap();
            let mut h = symmetrize(&e.hess.unwrap());
            let x = &z[nf..];
            let phi = barrier(e.f, x, &s, lambda, mu);

            // reduced system on z
            let mut rhs = -&g;
            let mut d1 = vec![0.0; nx];
            let mut d2 = vec![0.0; nx];
            let mut gs = vec![0.0; nx];
            let mut gnorm: f64 = g.rows(0, nf).amax();
            for j in 0..nx {
                let (a, b) = (s[j] - x[j], s[j] + x[j]);
                d1[j] = mu / (a * a) + mu / (b * b);
                d2[j] = -mu / (a * a) + mu / (b * b);
                gs[j] = lambda - mu / a - mu / b;
                let gx = g[nf + j] + mu / a - mu / b;
                gnorm = gnorm.max(gx.abs()).max(gs[j].abs());
                rhs[nf + j] = -gx + d2[j] * gs[j] / d1[j];
                h[(nf + j, nf + j)] += d1[j] - d2[j] * d2[j] / d1[j];
            }
            if gnorm < settings.grad_tol.max(mu) {
                level_done = true;
                break;
            }
            iterations += 1;
            let mut damp = 0.0;
            let dz = loop {
                let mut hd = h.clone();
                for i in 0..nf {
                    hd[(i, i)] += damp * h[(i, i)].abs().max(1e-12);
                }
                if let Some(c) = hd.cholesky() {
                    break c.solve(&rhs);
                }
                damp = if damp == 0.0 { 1e-8 } else { damp * 10.0 };
                if damp > 1e12 {
                    return Err(SolverError::IndefiniteHessian);
                }
            };
            let dx: Vec<f64> = dz.rows(nf, nx).iter().copied().collect();
            let ds: Vec<f64> = (0..nx).map(|j| -(gs[j] + d2[j] * dx[j]) / d1[j]).collect();
            let mut alpha = max_step(x, &s, &dx, &ds, settings.fraction_to_boundary);
            let mut accepted = false;
            for _ in 0..40 {
                let zt: Vec<f64> = z.iter().zip(dz.iter()).map(|(a, b)| a + alpha * b).collect();
                let st: Vec<f64> = s.iter().zip(&ds).map(|(a, b)| a + alpha * b).collect();
                if let Ok(t) = p.eval(&zt, &frozen, Order::Value) {
                    let pt = barrier(t.f, &zt[nf..], &st, lambda, mu);
                    if pt <= phi {
                        history.push(Descent { before: phi, after: pt });
                        z = zt;
                        s = st;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                // stalled at working precision for this level
                level_done = true;
                break;
            }
            if alpha * dz.norm() < settings.step_tol {
                level_done = true;
                break;
            }
        }
        converged &= level_done;
        if mu < settings.mu_min {
            break;
        }
        mu *= settings.mu_factor;
    }

    // on the central path an active bound has s − |x| far below |x|
    let active: Vec<bool> = z[nf..].iter().zip(&s).map(|(x, s)| s - x.abs() < 0.5 * x.abs()).collect();
    let frozen = p.freeze(&z)?;
    // barrier iterates never reach zero exactly, and without strict
    // complementarity they stall near √μ; also try the support without them
    let big = z[nf..].iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let cut = (1e-3 * big).max(10.0 * settings.mu_min.sqrt());
    let trimmed: Vec<bool> = z[nf..].iter().zip(&active).map(|(x, &a)| a && x.abs() >= cut).collect();
    let mut best = polish(p, z.clone(), active.clone(), lambda, &frozen, order)?;
    if trimmed != active {
        let alt = polish(p, z, trimmed, lambda, &frozen, order)?;
        if alt.2 < best.2 {
            best = alt;
        }
    }
    let (z, e, kkt) = best;
    let f = e.f + lambda * z[nf..].iter().map(|x| x.abs()).sum::<f64>();
    Ok(IpOutcome {
        z,
        f,
        hess: symmetrize(&e.hess.unwrap()),
        kkt,
        iterations,
        converged,
        history,
    })
}

/// Minimize the stage-2 objective from `(Θ̄_g, Θ_I = 0)`; with `λ = 0` the box is
/// dropped and the problem is solved as an unconstrained least-squares problem.
pub fn minimize_stage2(problem: &MapProblem, settings: &SolverSettings) -> Result<MapSolution, SolverError> {
    if problem.stage != Stage::Stage2 {
        return Err(SolverError::Config(format!(
            "generator {}: stage-2 solver called on a stage-1 problem",
            problem.name
        )));
    }
    let sp = SmoothProblem(problem);
    let m = problem.n_params();
    let mut z0 = problem.prior.mean.clone();
    z0.resize(sp.dim(), 0.0);
    let (z, f, hess, kkt, iterations, converged, history) = if problem.lambda == 0.0 {
        let o = levenberg(&sp, z0, settings)?;
        let kkt = o.grad.amax();
        (o.z, o.f, o.hess, kkt, o.iterations, o.converged, o.history)
    } else {
        let o = interior_point(&sp, z0, problem.lambda, settings)?;
        (o.z, o.f, o.hess, o.kkt, o.iterations, o.converged, o.history)
    };
    Ok(MapSolution {
        name: problem.name.clone(),
        stage: Stage::Stage2,
        theta: z[..m].to_vec(),
        objective: f,
        hessian: hess.view((0, 0), (m, m)).into_owned(),
        gradient_norm: kkt,
        iterations,
        converged,
        injections: Some(InjectionVariables::from_flat(&problem.injection_bins, &z[m..])),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::stage1::tests::Affine;

    fn soft(y: f64, t: f64) -> f64 {
        y.signum() * (y.abs() - t).max(0.0)
    }

    #[test]
    fn scalar_lasso_is_soft_threshold() {
        // f = (y − x)² + λ|x| → x = soft(y, λ/2)
        for &(y, lambda) in &[(1.3, 0.4), (-2.0, 1.0), (0.2, 1.0), (-0.3, 0.5), (0.0, 0.1), (5.0, 0.01)] {
            let p = Affine {
                a: DMatrix::from_element(1, 1, 1.0),
                y: DVector::from_element(1, y),
                w: DMatrix::identity(1, 1),
                zbar: DVector::zeros(1),
                p: DMatrix::zeros(1, 1),
                n_free: 0,
                lambda,
            };
            let out = interior_point(&p, vec![0.0], p.lambda, &SolverSettings::default()).unwrap();
            let expect = soft(y, lambda / 2.0);
            assert!((out.z[0] - expect).abs() < 1e-8, "y={y} λ={lambda}: {} vs {expect}", out.z[0]);
            assert!(out.converged);
            assert!(out.kkt < 1e-6);
        }
    }

    #[test]
    fn lasso_with_free_coordinates_matches_coordinate_descent() {
        let a = DMatrix::from_row_slice(4, 3, &[1.0, 0.5, 0.0, 0.2, 1.0, -0.3, -0.4, 0.1, 1.0, 0.3, -0.2, 0.4]);
        let y = DVector::from_column_slice(&[1.0, -0.5, 0.8, 0.1]);
        let lambda = 0.3;
        let p = Affine {
            a: a.clone(),
            y: y.clone(),
            w: DMatrix::identity(4, 4),
            zbar: DVector::zeros(3),
            p: DMatrix::from_diagonal(&DVector::from_column_slice(&[0.1, 0.0, 0.0])),
            n_free: 1,
            lambda,
        };
        let out = interior_point(&p, vec![0.0; 3], lambda, &SolverSettings::default()).unwrap();
        // oracle: cyclic coordinate descent with exact soft-threshold updates
        let mut z = DVector::zeros(3);
        for _ in 0..20000 {
            for k in 0..3 {
                let col = a.column(k);
                let r = &y - &a * &z + col * z[k];
                let q = col.dot(&col) + p.p[(k, k)];
                let c = col.dot(&r);
                z[k] = if k < 1 { c / q } else { soft(c, lambda / 2.0) / q };
            }
        }
        for k in 0..3 {
            assert!((out.z[k] - z[k]).abs() < 1e-7, "{k}: {} vs {}", out.z[k], z[k]);
        }
    }
}
