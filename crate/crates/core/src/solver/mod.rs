//! Frozen-covariance MAP solvers for both stages and the source verdict.

mod kernel;
pub mod generic;
pub mod locate;
pub mod objective;
pub mod stage1;
pub mod stage2;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bayes::{MapProblem, Stage};
use crate::error::SolverError;
use crate::likelihood::InjectionVariables;

pub use generic::{minimize_l1, minimize_smooth, SmoothSolution};
pub use locate::{default_iota, lambda_scale, locate_sources, prediction_error_pct, GeneratorVerdict, SourceReport};
pub use objective::{evaluate, freeze, frf_at, hessian, objective_gradient, Evaluation, FrozenCovariance, Order};
pub use stage1::{minimize_joint_stage1, minimize_stage1, minimize_stage1_from};
pub use stage2::minimize_stage2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_iter: usize,
    pub step_tol: f64,
    pub grad_tol: f64,
    /// Keep the second-derivative residual term (exact Newton) instead of Gauss–Newton.
    pub full_newton: bool,
    /// Refresh the frozen covariance every k iterations.
    pub refresh_every: usize,
    pub mu0: f64,
    pub mu_factor: f64,
    pub mu_min: f64,
    pub fraction_to_boundary: f64,
    /// Newton iterations per barrier level.
    pub max_inner: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iter: 200,
            step_tol: 1e-8,
            grad_tol: 1e-6,
            full_newton: false,
            refresh_every: 1,
            mu0: 1.0,
            mu_factor: 0.2,
            mu_min: 1e-8,
            fraction_to_boundary: 0.995,
            max_inner: 50,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), SolverError> {
        let ok = self.max_iter > 0
            && self.refresh_every > 0
            && self.max_inner > 0
            && self.step_tol > 0.0
            && self.grad_tol > 0.0
            && self.mu0 > 0.0
            && self.mu_min > 0.0
            && self.mu_factor > 0.0
            && self.mu_factor < 1.0
            && self.fraction_to_boundary > 0.0
            && self.fraction_to_boundary < 1.0;
        if ok {
            Ok(())
        } else {
            Err(SolverError::Config("invalid solver settings".into()))
        }
    }

    fn order(&self) -> Order {
        if self.full_newton {
            Order::Full
        } else {
            Order::GaussNewton
        }
    }
}

/// One accepted step: objective before and after, both with the same frozen covariance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Descent {
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapSolution {
    pub name: String,
    pub stage: Stage,
    /// Log-parameters at the optimum.
    pub theta: Vec<f64>,
    pub objective: f64,
    /// Objective Hessian over the parameter block (symmetrized).
    pub hessian: DMatrix<f64>,
    /// Stage 1: unconstrained gradient norm. Stage 2: KKT residual.
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub injections: Option<InjectionVariables>,
    pub history: Vec<Descent>,
}

impl MapSolution {
    pub fn max_injection_norm(&self) -> f64 {
        self.injections
            .as_ref()
            .map(|inj| inj.norms().into_iter().fold(0.0, f64::max))
            .unwrap_or(0.0)
    }
}

/// A smooth objective with a frozen-covariance handle. The last `dim - n_free`
/// coordinates are the ones the stage-2 scheme bounds by slacks.
pub trait Smooth {
    type Frozen;
    fn dim(&self) -> usize;
    fn n_free(&self) -> usize;
    fn freeze(&self, z: &[f64]) -> Result<Self::Frozen, SolverError>;
    fn eval(&self, z: &[f64], frozen: &Self::Frozen, order: Order) -> Result<Evaluation, SolverError>;
}

/// Stage-agnostic view of a problem without its slack block: `[Θ_g; Θ_I]`.
pub(crate) struct SmoothProblem<'a>(pub &'a MapProblem);

impl SmoothProblem<'_> {
    fn n_inj(&self) -> usize {
        match self.0.stage {
            Stage::Stage1 => 0,
            Stage::Stage2 => self.0.n_injections(),
        }
    }
}

impl Smooth for SmoothProblem<'_> {
    type Frozen = FrozenCovariance;

    fn dim(&self) -> usize {
        self.0.n_params() + self.n_inj()
    }

    fn n_free(&self) -> usize {
        self.0.n_params()
    }

    fn freeze(&self, z: &[f64]) -> Result<FrozenCovariance, SolverError> {
        freeze(self.0, &z[..self.0.n_params()])
    }

    fn eval(&self, z: &[f64], frozen: &FrozenCovariance, order: Order) -> Result<Evaluation, SolverError> {
        let ni = self.n_inj();
        if ni == 0 {
            return evaluate(self.0, z, frozen, order);
        }
        // slack block at zero contributes nothing; drop it from the result
        let d = self.dim();
        let mut full = z.to_vec();
        full.resize(d + ni, 0.0);
        let e = evaluate(self.0, &full, frozen, order)?;
        Ok(Evaluation {
            f: e.f,
            grad: e.grad.map(|g| g.rows(0, d).into_owned()),
            hess: e.hess.map(|h| h.view((0, 0), (d, d)).into_owned()),
        })
    }
}

/// Sum of independent problems over a concatenated decision vector.
pub(crate) struct JointProblem<'a> {
    pub parts: Vec<SmoothProblem<'a>>,
}

impl JointProblem<'_> {
    fn offsets(&self) -> Vec<usize> {
        let mut o = vec![0];
        for p in &self.parts {
            o.push(o.last().unwrap() + p.dim());
        }
        o
    }
}

impl Smooth for JointProblem<'_> {
    type Frozen = Vec<FrozenCovariance>;

    fn dim(&self) -> usize {
        self.parts.iter().map(|p| p.dim()).sum()
    }

    fn n_free(&self) -> usize {
        self.dim()
    }

    fn freeze(&self, z: &[f64]) -> Result<Self::Frozen, SolverError> {
        let o = self.offsets();
        self.parts
            .iter()
            .enumerate()
            .map(|(i, p)| p.freeze(&z[o[i]..o[i + 1]]))
            .collect()
    }

    fn eval(&self, z: &[f64], frozen: &Self::Frozen, order: Order) -> Result<Evaluation, SolverError> {
        let o = self.offsets();
        let d = self.dim();
        let mut f = 0.0;
        let mut g = (order != Order::Value).then(|| nalgebra::DVector::zeros(d));
        let mut h = matches!(order, Order::GaussNewton | Order::Full).then(|| DMatrix::zeros(d, d));
        for (i, p) in self.parts.iter().enumerate() {
            let e = p.eval(&z[o[i]..o[i + 1]], &frozen[i], order)?;
            f += e.f;
            let n = o[i + 1] - o[i];
            if let (Some(g), Some(gi)) = (g.as_mut(), e.grad) {
                g.rows_mut(o[i], n).copy_from(&gi);
            }
            if let (Some(h), Some(hi)) = (h.as_mut(), e.hess) {
                h.view_mut((o[i], o[i]), (n, n)).copy_from(&hi);
            }
        }
        Ok(Evaluation { f, grad: g, hess: h })
    }
}

pub(crate) fn symmetrize(h: &DMatrix<f64>) -> DMatrix<f64> {
    (h + h.transpose()) * 0.5
}

#[cfg(test)]
pub(crate) mod fixture {
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    use crate::bayes::{assemble, GaussianPrior, MapProblem, ProblemSettings, Stage};
    use crate::dynamics::{GeneratorModel, GeneratorParams, ModelOrder, TerminalCondition};
    use crate::spectra::{band_mask, frequency_grid, BandMask, SpectralDataset};

    pub const K: usize = 60;
    pub const FS: f64 = 5.0;

    pub fn model(order: ModelOrder) -> GeneratorModel {
        GeneratorModel::new(
            GeneratorParams {
                model: order,
                h: 3.5,
                d: 2.0,
                xd: 1.2,
                xd_prime: 0.3,
                xq: 0.9,
                td0_prime: 6.0,
                e_prime: 1.2,
                ka: 40.0,
                ta: 0.2,
            },
            TerminalCondition { p: 0.7, q: 0.2, v: 1.01, theta: -0.2 },
        )
    }

    /// Spectra consistent with the true model, PMU noise of variance `sigma2`
    /// and an extra current injection `fo` at bin `fo_bin`.
    pub fn spectra(gm: &GeneratorModel, sigma2: f64, fo_bin: usize, fo: [Complex64; 2], seed: u64) -> SpectralDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = frequency_grid(K, FS);
        let n = 2 * K + 1;
        let lin = gm.linear_model(&gm.log_params()).unwrap();
        let y = crate::dynamics::frf(&lin, &grid[1..]).unwrap();
        let sd = (0.5 * n as f64 * sigma2).sqrt();
        let cn = |rng: &mut ChaCha8Rng| {
            Complex64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)) * sd
        };
        let zero = Complex64::new(0.0, 0.0);
        let (mut v, mut th, mut i, mut phi) = (vec![zero], vec![zero], vec![zero], vec![zero]);
        for w in 1..=K {
            let amp = 0.3 * n as f64 * 1e-3 / (1.0 + grid[w]);
            let vt = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * amp;
            let tt = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * amp * 3.0;
            let yw = y.y[w - 1];
            let mut it = yw[(0, 0)] * vt + yw[(0, 1)] * tt;
            let mut pt = yw[(1, 0)] * vt + yw[(1, 1)] * tt;
            if w == fo_bin {
                it += fo[0];
                pt += fo[1];
            }
            v.push(vt + cn(&mut rng));
            th.push(tt + cn(&mut rng));
            i.push(it + cn(&mut rng));
            phi.push(pt + cn(&mut rng));
        }
        SpectralDataset {
            grid,
            v,
            theta: th,
            i,
            phi,
            noise_var: [sigma2; 4],
            n_samples: n,
        }
    }

    pub fn mask(spec: &SpectralDataset, bin: usize, halfwidth: usize) -> BandMask {
        let dw = spec.grid[1];
        band_mask(&spec.grid, spec.grid[bin], dw * halfwidth as f64).unwrap()
    }

    pub fn problem(stage: Stage, lambda: f64, prior_shift: f64, prior_var: f64, seed: u64) -> MapProblem {
        problem_with_noise(stage, lambda, prior_shift, prior_var, seed, 1e-6)
    }

    pub fn problem_with_noise(
        stage: Stage,
        lambda: f64,
        prior_shift: f64,
        prior_var: f64,
        seed: u64,
        sigma2: f64,
    ) -> MapProblem {
        let gm = model(ModelOrder::FluxDecay3);
        let fo_bin = 12;
        let spec = spectra(&gm, sigma2, fo_bin, [Complex64::new(0.05, -0.02), Complex64::new(-0.01, 0.03)], seed);
        let truth = gm.log_params();
        let mean: Vec<f64> = truth.iter().enumerate().map(|(k, t)| t + prior_shift * (1.0 - 0.3 * k as f64)).collect();
        let prior = GaussianPrior::new(mean, vec![prior_var; truth.len()]).unwrap();
        let masks = vec![mask(&spec, fo_bin, 1)];
        assemble("g", stage, gm, spec, prior, masks, &ProblemSettings { lambda, ..Default::default() }).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixture::*;
    use super::*;
    use nalgebra::DVector;
    use crate::bayes::{posterior_update, GaussianPrior};
    use crate::dynamics::frf::frf;
    use crate::likelihood::bin_gap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_point(p: &MapProblem, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let m = p.n_params();
        let ni = p.dim() - m;
        let mut z: Vec<f64> = p.prior.mean.iter().map(|t| t + rng.random_range(-0.2..0.2)).collect();
        for k in 0..ni {
            z.push(if k < ni / 2 { rng.random_range(-0.05..0.05) } else { rng.random_range(0.0..0.1) });
        }
        z
    }

    fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = problem(Stage::Stage2, 3.0, 0.1, 0.5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let z = random_point(&p, &mut rng);
            let fr = freeze(&p, &z[..p.n_params()]).unwrap();
            let (_, g) = objective_gradient(&p, &z, &fr).unwrap();
            let fd = DVector::from_fn(z.len(), |k, _| {
                let h = 1e-6 * (1.0 + z[k].abs());
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[k] += h;
                zm[k] -= h;
                let fp = evaluate(&p, &zp, &fr, Order::Value).unwrap().f;
                let fm = evaluate(&p, &zm, &fr, Order::Value).unwrap().f;
                (fp - fm) / (2.0 * h)
            });
            assert!(rel(&g, &fd) < 1e-5, "{}", rel(&g, &fd));
        }
    }

    #[test]
    fn full_hessian_matches_differenced_gradient() {
        let p = problem(Stage::Stage2, 3.0, 0.1, 0.5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let z = random_point(&p, &mut rng);
            let fr = freeze(&p, &z[..p.n_params()]).unwrap();
            let h = hessian(&p, &z, &fr, true).unwrap();
            let n = z.len();
            let mut fd = DMatrix::zeros(n, n);
            for k in 0..n {
                let e = 1e-5 * (1.0 + z[k].abs());
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[k] += e;
                zm[k] -= e;
                let gp = objective_gradient(&p, &zp, &fr).unwrap().1;
                let gm = objective_gradient(&p, &zm, &fr).unwrap().1;
                fd.set_column(k, &((gp - gm) / (2.0 * e)));
            }
            let err = (&h - &fd).norm() / fd.norm();
            assert!(err < 1e-3, "{err}");
            assert!((&h - h.transpose()).amax() <= 1e-9 * h.amax());
        }
    }

    #[test]
    fn gauss_newton_block_is_psd() {
        let p = problem(Stage::Stage2, 3.0, 0.3, 0.5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let z = random_point(&p, &mut rng);
            let fr = freeze(&p, &z[..p.n_params()]).unwrap();
            let h = symmetrize(&hessian(&p, &z, &fr, false).unwrap());
            let ev = h.symmetric_eigenvalues();
            assert!(ev.min() >= -1e-9 * ev.amax(), "{}", ev.min());
        }
    }

    #[test]
    fn injection_block_is_affine() {
        let p = problem(Stage::Stage2, 3.0, 0.1, 0.5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = random_point(&p, &mut rng);
        let fr = freeze(&p, &z[..p.n_params()]).unwrap();
        let hf = hessian(&p, &z, &fr, true).unwrap();
        let hg = hessian(&p, &z, &fr, false).unwrap();
        let m = p.n_params();
        let n = z.len();
        assert!((hf.view((m, 0), (n - m, n)) - hg.view((m, 0), (n - m, n))).amax() == 0.0);
        // and the injection gradient at each bin is −2 Γ̄⁻¹ R restricted to that bin, plus nothing else
        let (_, g) = objective_gradient(&p, &z, &fr).unwrap();
        let frf_y = frf_at(&p, &z[..m]).unwrap();
        for (q, &w) in p.injection_bins.iter().enumerate() {
            let gap = bin_gap(&p.spec, &frf_y.y[w], w);
            let o = m + 4 * q;
            let r = nalgebra::Vector4::new(gap[0].re, gap[0].im, gap[1].re, gap[1].im)
                - nalgebra::Vector4::new(z[o], z[o + 1], z[o + 2], z[o + 3]);
            let b = p.data_bins.iter().position(|&d| d == w).unwrap();
            let expect = fr.inv[b] * r * -2.0;
            for c in 0..4 {
                assert!((g[o + c] - expect[c]).abs() <= 1e-10 * expect.amax());
            }
        }
    }

    #[test]
    fn stage2_at_zero_injection_equals_stage1_on_all_bins() {
        let p2 = problem(Stage::Stage2, 3.0, 0.1, 0.5, 5);
        let mut p1 = p2.with_stage(Stage::Stage1);
        p1.data_bins = p2.data_bins.clone();
        let theta = p2.prior.mean.clone();
        let mut z = theta.clone();
        z.resize(p2.dim(), 0.0);
        let fr = freeze(&p2, &theta).unwrap();
        let f2 = evaluate(&p2, &z, &fr, Order::Value).unwrap().f;
        let f1 = evaluate(&p1, &theta, &fr, Order::Value).unwrap().f;
        assert!((f1 - f2).abs() <= 1e-12 * f1);
    }

    #[test]
    fn noise_free_truth_has_tiny_data_gradient() {
        let gm = model(crate::dynamics::ModelOrder::FluxDecay3);
        let zero = num_complex::Complex64::new(0.0, 0.0);
        let spec = spectra(&gm, 0.0, 12, [zero; 2], 11);
        let truth = gm.log_params();
        let mut spec_noisy = spec.clone();
        spec_noisy.noise_var = [1e-6; 4];
        let prior = GaussianPrior::new(truth.clone(), vec![1.0; truth.len()]).unwrap();
        let p = crate::bayes::assemble("g", Stage::Stage1, gm, spec_noisy, prior, vec![], &Default::default()).unwrap();
        let fr = freeze(&p, &truth).unwrap();
        let e = evaluate(&p, &truth, &fr, Order::GaussNewton).unwrap();
        // scale: what a unit step in any parameter would produce
        let scale = e.hess.unwrap().amax().sqrt();
        assert!(e.grad.unwrap().norm() < 1e-6 * scale);
        assert!(e.f < 1e-12);
    }

    #[test]
    fn tiny_prior_variance_pins_parameters() {
        let p = problem(Stage::Stage1, 0.0, 0.2, 1e-12, 12);
        let s = minimize_stage1(&p, &SolverSettings::default()).unwrap();
        for (a, b) in s.theta.iter().zip(&p.prior.mean) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn stage1_recovers_parameters_and_descends() {
        let p = problem_with_noise(Stage::Stage1, 0.0, 0.3, 1.0, 13, 1e-8);
        let truth = p.model.log_params();
        let s = minimize_stage1(&p, &SolverSettings::default()).unwrap();
        assert!(s.converged);
        assert!(s.history.iter().all(|d| d.after <= d.before));
        let before: f64 = p.prior.mean.iter().zip(&truth).map(|(a, b)| (a - b).abs()).sum();
        let after: f64 = s.theta.iter().zip(&truth).map(|(a, b)| (a - b).abs()).sum();
        assert!(after < 0.5 * before, "{after} vs {before}");
        let post = posterior_update(&s.theta, &(&s.hessian * 0.5)).unwrap();
        assert!(post.variance.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn huge_lambda_gives_zero_injections() {
        let base = problem(Stage::Stage2, 1.0, 0.05, 1e-4, 14);
        let fr = freeze(&base, &base.prior.mean).unwrap();
        let lambda = 1e6 * 5.0 * lambda_scale(&fr);
        let p = MapProblem { lambda, ..base };
        let s = minimize_stage2(&p, &SolverSettings::default()).unwrap();
        assert!(s.max_injection_norm() < 1e-9, "{}", s.max_injection_norm());
    }

    #[test]
    fn unpenalized_injection_equals_gap() {
        let mut p = problem(Stage::Stage2, 0.0, 0.1, 1e-14, 15);
        let w = p.injection_bins[1];
        p.injection_bins = vec![w];
        let s = minimize_stage2(&p, &SolverSettings::default()).unwrap();
        let lin = p.model.linear_model(&s.theta).unwrap();
        let y = frf(&lin, &p.spec.grid).unwrap();
        let gap = bin_gap(&p.spec, &y.y[w], w);
        let got = s.injections.unwrap().at(w).unwrap();
        let expect = [gap[0].re, gap[0].im, gap[1].re, gap[1].im];
        let en = expect.iter().map(|x| x * x).sum::<f64>().sqrt();
        let err = got.iter().zip(&expect).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err < 1e-8 * en, "{err} vs {en}");
    }

    #[test]
    fn stage2_satisfies_kkt_and_flags_the_forced_bin() {
        let p1 = problem_with_noise(Stage::Stage1, 0.0, 0.2, 0.5, 16, 1e-8);
        let s1 = minimize_stage1(&p1, &SolverSettings::default()).unwrap();
        let post = posterior_update(&s1.theta, &(&s1.hessian * 0.5)).unwrap();
        let base = p1.with_stage(Stage::Stage2).with_prior(post);
        let fr = freeze(&base, &base.prior.mean).unwrap();
        let p = MapProblem { lambda: 5.0 * lambda_scale(&fr), ..base };
        let s = minimize_stage2(&p, &SolverSettings::default()).unwrap();
        assert!(s.converged);
        assert!(s.gradient_norm < 1e-6, "kkt {}", s.gradient_norm);
        let inj = s.injections.unwrap();
        let norms = inj.norms();
        let peak = inj.bins[norms.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0];
        assert_eq!(peak, 12);
    }

    #[test]
    fn joint_solve_decouples() {
        let ps = [
            problem_with_noise(Stage::Stage1, 0.0, 0.2, 0.5, 17, 1e-8),
            problem_with_noise(Stage::Stage1, 0.0, -0.15, 0.3, 18, 1e-8),
        ];
        let settings = SolverSettings { step_tol: 1e-14, grad_tol: 1e-10, max_iter: 1000, ..Default::default() };
        let joint = minimize_joint_stage1(&ps, &settings).unwrap();
        for (p, j) in ps.iter().zip(&joint) {
            let s = minimize_stage1(p, &settings).unwrap();
            for (a, b) in s.theta.iter().zip(&j.theta) {
                assert!((a - b).abs() < 1e-7 * (1.0 + a.abs()), "{a} vs {b}");
            }
        }
        // the joint objective is the plain sum at any point
        let joint_p = JointProblem { parts: ps.iter().map(SmoothProblem).collect() };
        let z: Vec<f64> = ps.iter().flat_map(|p| p.prior.mean.iter().map(|t| t + 0.01)).collect();
        let fr = joint_p.freeze(&z).unwrap();
        let fj = joint_p.eval(&z, &fr, Order::Value).unwrap().f;
        let m = ps[0].n_params();
        let fs: f64 = (0..2)
            .map(|i| {
                let zi = &z[i * m..(i + 1) * m];
                evaluate(&ps[i], zi, &freeze(&ps[i], zi).unwrap(), Order::Value).unwrap().f
            })
            .sum();
        assert!((fj - fs).abs() <= 1e-12 * fs);
    }
}
