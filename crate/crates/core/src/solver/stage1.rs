//! Stage 1: Levenberg-damped Gauss–Newton with a frozen covariance refreshed
//! between iterations.

use nalgebra::{DMatrix, DVector};

use super::{symmetrize, Descent, JointProblem, MapSolution, Order, Smooth, SmoothProblem, SolverSettings};
use crate::bayes::{MapProblem, Stage};
use crate::error::SolverError;

pub(crate) struct LmOutcome {
    pub z: Vec<f64>,
    pub f: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<Descent>,
}

const MU_START: f64 = 1e-3;
const MU_MAX: f64 = 1e12;

/// Solve `(H + μ diag H) dz = −g`; `None` when the damped matrix is not PD.
fn damped_step(h: &DMatrix<f64>, g: &DVector<f64>, mu: f64) -> Option<DVector<f64>> {
    let mut hd = symmetrize(h);
    for i in 0..hd.nrows() {
        let d = hd[(i, i)].abs().max(1e-12);
        hd[(i, i)] += mu * d;
    }
    hd.cholesky().map(|c| -c.solve(g))
}

pub(crate) fn levenberg<S: Smooth>(
    s: &S,
    z0: Vec<f64>,
    settings: &SolverSettings,
) -> Result<LmOutcome, SolverError> {
    settings.validate()?;
    let order = settings.order();
    let mut z = z0;
    let mut frozen = s.freeze(&z)?;
    let mut mu = MU_START;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < settings.max_iter {
        if iterations > 0 && iterations % settings.refresh_every == 0 {
            frozen = s.freeze(&z)?;
        }
        let e = s.eval(&z, &frozen, order)?;
        let g = e.grad.unwrap();
        let h = e.hess.unwrap();
        if g.norm() < settings.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut accepted = None;
        while mu < MU_MAX {
            let Some(dz) = damped_step(&h, &g, mu) else {
                mu *= 10.0;
                continue;
            };
            let trial: Vec<f64> = z.iter().zip(dz.iter()).map(|(a, b)| a + b).collect();
            match s.eval(&trial, &frozen, Order::Value) {
                Ok(t) if t.f <= e.f => {
                    accepted = Some((trial, t.f, dz.norm()));
                    mu = (mu / 3.0).max(1e-12);
                    break;
                }
                // an unstable or resonant trial model counts as a rejected step
                _ => mu *= 10.0,
            }
        }
        let Some((trial, ft, step)) = accepted else {
            // no descent available at working precision
            converged = true;
            break;
        };
        history.push(Descent { before: e.f, after: ft });
        z = trial;
        if step < settings.step_tol {
            converged = true;
            break;
        }
    }

    let frozen = s.freeze(&z)?;
    let e = s.eval(&z, &frozen, order)?;
    Ok(LmOutcome {
        z,
        f: e.f,
        grad: e.grad.unwrap(),
        hess: symmetrize(&e.hess.unwrap()),
        iterations,
        converged,
        history,
    })
}

fn check_stage(problem: &MapProblem) -> Result<(), SolverError> {
    if problem.stage != Stage::Stage1 {
        return Err(SolverError::Config(format!(
            "generator {}: stage-1 solver called on a stage-2 problem",
            problem.name
        )));
    }
    Ok(())
}

/// Minimize the stage-1 objective starting from the prior mean.
pub fn minimize_stage1(problem: &MapProblem, settings: &SolverSettings) -> Result<MapSolution, SolverError> {
    minimize_stage1_from(problem, problem.prior.mean.clone(), settings)
}

/// Minimize the stage-1 objective from a given log-parameter vector.
pub fn minimize_stage1_from(
    problem: &MapProblem,
    theta0: Vec<f64>,
    settings: &SolverSettings,
) -> Result<MapSolution, SolverError> {
    check_stage(problem)?;
    if theta0.len() != problem.n_params() {
        return Err(SolverError::Config("start vector has the wrong length".into()));
    }
    let out = levenberg(&SmoothProblem(problem), theta0, settings)?;
    Ok(MapSolution {
        name: problem.name.clone(),
        stage: Stage::Stage1,
        theta: out.z,
        objective: out.f,
        gradient_norm: out.grad.norm(),
        hessian: out.hess,
        iterations: out.iterations,
        converged: out.converged,
        injections: None,
        history: out.history,
    })
}

/// Minimize the sum of several stage-1 objectives as one problem. The sum is
/// separable, so this matches the per-generator solves; it exists to check that.
pub fn minimize_joint_stage1(
    problems: &[MapProblem],
    settings: &SolverSettings,
) -> Result<Vec<MapSolution>, SolverError> {
    for p in problems {
        check_stage(p)?;
    }
    let joint = JointProblem {
        parts: problems.iter().map(SmoothProblem).collect(),
    };
    let z0: Vec<f64> = problems.iter().flat_map(|p| p.prior.mean.iter().copied()).collect();
    let out = levenberg(&joint, z0, settings)?;
    let mut o = 0;
    Ok(problems
        .iter()
        .map(|p| {
            let m = p.n_params();
            let sol = MapSolution {
                name: p.name.clone(),
                stage: Stage::Stage1,
                theta: out.z[o..o + m].to_vec(),
                objective: out.f,
                gradient_norm: out.grad.rows(o, m).norm(),
                hessian: out.hess.view((o, o), (m, m)).into_owned(),
                iterations: out.iterations,
                converged: out.converged,
                injections: None,
                history: Vec::new(),
            };
            o += m;
            sol
        })
        .collect())
}
