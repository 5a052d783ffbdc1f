//! The two-stage location procedure over a set of generators: spectra, priors,
//! stage 1 on the out-of-band data, posterior tightening, stage 2 with
//! band-limited injections, and the threshold verdict.

use std::f64::consts::TAU;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{assemble, posterior_update, GaussianPrior, MapProblem, ProblemSettings, Stage};
use crate::dynamics::{GeneratorModel, GeneratorParams, ParamKind, ParamPrior, TerminalCondition};
use crate::error::{Error, Result, SolverError};
use crate::likelihood::bin_gap;
use crate::solver::{
    default_iota, freeze, frf_at, lambda_scale, locate_sources, minimize_stage1_from, minimize_stage2,
    prediction_error_pct, MapSolution, SolverSettings, SourceReport,
};
use crate::simkit::io::RecordedDataset;
use crate::simkit::{perturb_params, rng_stream, FoLabel, LabeledDataset, Stream};
use crate::spectra::{band_mask, BandMask, PmuWindow, SpectralDataset, DFT_CONSTANT_DEFAULT};

/// One declared FO band, `f_d ± f_r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub freq_hz: f64,
    pub halfwidth_hz: f64,
}

/// Which stages to run. `Stage2` skips stage 1 and solves stage 2 from the raw
/// priors; it exists for debugging and for checking that stage 1 matters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageMode {
    #[default]
    Full,
    Stage1,
    Stage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocateSettings {
    pub bands: Vec<BandSpec>,
    pub solver: SolverSettings,
    /// `λ = λ₀ · median(diag Γ̄_L)^{-1/2}`, per generator.
    pub lambda0: f64,
    /// Fixed threshold; the default rule is used when absent.
    pub iota: Option<f64>,
    pub dft_constant: f64,
    pub stage: StageMode,
}

impl Default for LocateSettings {
    fn default() -> Self {
        Self {
            bands: Vec::new(),
            solver: SolverSettings::default(),
            lambda0: DEFAULT_LAMBDA0,
            iota: None,
            dft_constant: DFT_CONSTANT_DEFAULT,
            stage: StageMode::Full,
        }
    }
}

pub const DEFAULT_LAMBDA0: f64 = 5.0;

/// Relative floor on the default ι: a fraction of the median (over generators)
/// of the largest measured in-band current spectrum magnitude. Keeps round-off
/// sized injections from being flagged when every generator is clean.
pub const IOTA_FLOOR: f64 = 1e-6;

impl LocateSettings {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return Err(Error::Config(format!("lambda0 must be >= 0, got {}", self.lambda0)));
        }
        if let Some(i) = self.iota {
            if !(i >= 0.0 && i.is_finite()) {
                return Err(Error::Config(format!("iota must be >= 0, got {i}")));
            }
        }
        if !(self.dft_constant > 0.0 && self.dft_constant.is_finite()) {
            return Err(Error::Config("DFT constant must be positive".into()));
        }
        for b in &self.bands {
            if !(b.freq_hz > 0.0 && b.halfwidth_hz >= 0.0) {
                return Err(Error::Config(format!("bad band {} ± {} Hz", b.freq_hz, b.halfwidth_hz)));
            }
        }
        Ok(())
    }
}

/// Everything known about one generator before estimation.
#[derive(Clone, Debug)]
pub struct GeneratorInput {
    pub name: String,
    pub window: PmuWindow,
    /// Time-domain PMU noise variance per channel `[V, θ, I, φ]`.
    pub noise_var: [f64; 4],
    pub prior: ParamPrior,
}

/// Stage-1 outcome and the stage-2 problem it leads to.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub name: String,
    /// Log-parameters of the original prior mean.
    pub prior_theta: Vec<f64>,
    pub stage1: Option<MapSolution>,
    /// Stage-2 problem with the tightened prior and `λ = 0`.
    pub stage2_problem: MapProblem,
    /// `median(diag Γ̄_L)^{-1/2}` at the stage-2 starting point.
    pub lambda_unit: f64,
    pub seconds: f64,
}

pub fn masks(grid: &[f64], bands: &[BandSpec]) -> Result<Vec<BandMask>> {
    bands
        .iter()
        .map(|b| Ok(band_mask(grid, TAU * b.freq_hz, TAU * b.halfwidth_hz)?))
        .collect()
}

fn with_name(name: &str, e: impl Into<Error>) -> Error {
    Error::Generator {
        generator: name.to_string(),
        source: Box::new(e.into()),
    }
}

/// Build the spectra and problems for one generator and run stage 1 (unless
/// skipped), then tighten the prior.
pub fn prepare(input: &GeneratorInput, settings: &LocateSettings) -> Result<Prepared> {
    let name = input.name.as_str();
    let run = || -> Result<Prepared> {
        let t0 = Instant::now();
        let spec = SpectralDataset::from_window(&input.window, input.noise_var)?;
        let ss = input.window.steady_state.unwrap_or_else(|| input.window.means());
        let term = TerminalCondition::from_phasors(ss[0], ss[1], ss[2], ss[3]);
        let model = GeneratorModel::new(input.prior.mean.clone(), term);
        let prior = GaussianPrior::from_natural(&input.prior)?;
        let masks = masks(&spec.grid, &settings.bands)?;
        let ps = ProblemSettings {
            lambda: 0.0,
            dft_constant: settings.dft_constant,
        };
        let p1 = assemble(name, Stage::Stage1, model, spec, prior.clone(), masks, &ps)?;
        let (stage1, posterior) = if settings.stage == StageMode::Stage2 {
            (None, prior.clone())
        } else {
            let s = stage1_multistart(&p1, ss, &settings.solver)?;
            let post = posterior_update(&s.theta, &positive_definite(&(&s.hessian * 0.5)))?;
            (Some(s), post)
        };
        let p2 = p1.with_stage(Stage::Stage2).with_prior(posterior);
        let lambda_unit = lambda_scale(&freeze(&p2, &p2.prior.mean)?);
        Ok(Prepared {
            name: name.to_string(),
            prior_theta: prior.mean,
            stage1,
            stage2_problem: p2,
            lambda_unit,
            seconds: t0.elapsed().as_secs_f64(),
        })
    };
    run().map_err(|e| with_name(name, e))
}

/// Stage-1 start points: the prior mean, and for a classical machine the prior
/// mean with `E'` replaced by the value the measured steady state implies,
/// `|V + j X_d' I|`. A badly perturbed `E'` otherwise leaves the iteration
/// stranded near the loss of synchronizing torque.
pub fn stage1_starts(problem: &MapProblem, steady: [f64; 4]) -> Vec<Vec<f64>> {
    let mut starts = vec![problem.prior.mean.clone()];
    let kinds = problem.model.free_params();
    let (Some(ie), Some(ix)) = (
        kinds.iter().position(|&k| k == ParamKind::EPrime),
        kinds.iter().position(|&k| k == ParamKind::XdPrime),
    ) else {
        return starts;
    };
    let [v, th, i, phi] = steady;
    let xdp = problem.prior.mean[ix].exp();
    let e = Complex64::from_polar(v, th) + Complex64::new(0.0, xdp) * Complex64::from_polar(i, phi);
    if e.norm() > 0.0 {
        let mut z = problem.prior.mean.clone();
        z[ie] = e.norm().ln();
        if (z[ie] - problem.prior.mean[ie]).abs() > 1e-12 {
            starts.push(z);
        }
    }
    starts
}

/// Run stage 1 from every start and keep the lowest objective. Starts that fail
/// are skipped unless all of them do.
pub fn stage1_multistart(problem: &MapProblem, steady: [f64; 4], solver: &SolverSettings) -> Result<MapSolution> {
    let mut best: Option<MapSolution> = None;
    let mut first_err = None;
    let mut runs: Vec<Result<MapSolution>> = stage1_starts(problem, steady)
        .into_iter()
        .map(|z0| minimize_stage1_from(problem, z0, solver).map_err(Error::from))
        .collect();
    runs.push(stage1_continuation(problem, solver));
    for run in runs {
        match run {
            Ok(s) if best.as_ref().is_none_or(|b| s.objective < b.objective) => best = Some(s),
            Ok(_) => {}
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match (best, first_err) {
        (Some(b), _) => Ok(b),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("at least one start"),
    }
}

/// Data-weight continuation: stage 1 with the spectral noise inflated by
/// `1/β`, warm-started along `β = 1e-6, 1e-5, …, 1`. Early steps are dominated
/// by the prior, which keeps the iteration out of the far-off local minima the
/// full-weight objective has when the prior mean is poor.
pub fn stage1_continuation(problem: &MapProblem, solver: &SolverSettings) -> Result<MapSolution> {
    let mut z = problem.prior.mean.clone();
    let mut last = None;
    for e in (0..=6).rev() {
        let beta = 10f64.powi(-e);
        let mut p = problem.clone();
        p.dft_constant = problem.dft_constant / beta;
        let s = minimize_stage1_from(&p, z, solver)?;
        z = s.theta.clone();
        last = Some(s);
    }
    Ok(last.expect("at least one continuation step"))
}

/// Symmetric matrix with eigenvalues replaced by `max(|e|, 1e-10 · max|e|)`.
/// The refreshed stage-1 Hessian can be slightly indefinite where the frozen
/// iteration stops short of a minimum of the full objective.
pub fn positive_definite(h: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (h + h.transpose()) * 0.5;
    if sym.clone().cholesky().is_some() {
        return sym;
    }
    let eig = sym.symmetric_eigen();
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, e| a.max(e.abs()));
    let vals = eig.eigenvalues.map(|e| e.abs().max(1e-10 * top));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Stage 2 at `λ = λ₀ · lambda_unit`.
pub fn solve_stage2(prep: &Prepared, lambda0: f64, solver: &SolverSettings) -> Result<MapSolution> {
    let mut p = prep.stage2_problem.clone();
    p.lambda = lambda0 * prep.lambda_unit;
    minimize_stage2(&p, solver).map_err(|e| with_name(&prep.name, e))
}

/// Measured and predicted spectra at the stage-2 bins for one parameter point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Predicted `[Re Ĩ, Im Ĩ, Re φ̃, Im φ̃]` per data bin.
    pub predicted: Vec<[f64; 4]>,
    /// Prediction error percent difference per bin.
    pub error: Vec<f64>,
}

pub fn predict(problem: &MapProblem, theta: &[f64]) -> std::result::Result<Prediction, SolverError> {
    let frf = frf_at(problem, theta)?;
    let spec = &problem.spec;
    let mut predicted = Vec::with_capacity(problem.data_bins.len());
    let mut error = Vec::with_capacity(problem.data_bins.len());
    for &w in &problem.data_bins {
        let gap = bin_gap(spec, &frf.y[w], w);
        let meas = [spec.i[w], spec.phi[w]];
        let pred = [meas[0] - gap[0], meas[1] - gap[1]];
        predicted.push([pred[0].re, pred[0].im, pred[1].re, pred[1].im]);
        error.push(prediction_error_pct(meas, pred));
    }
    Ok(Prediction { predicted, error })
}

/// Per-generator outcome of a run. Failed generators carry `error` and no
/// solutions.
#[derive(Clone, Debug)]
pub struct GeneratorRun {
    pub name: String,
    pub prepared: Option<Prepared>,
    pub stage2: Option<MapSolution>,
    pub lambda: f64,
    pub error: Option<String>,
    pub seconds: f64,
}

impl GeneratorRun {
    pub fn converged(&self) -> bool {
        self.error.is_none()
            && self.prepared.as_ref().is_some_and(|p| p.stage1.as_ref().is_none_or(|s| s.converged))
            && self.stage2.as_ref().is_none_or(|s| s.converged)
    }
}

#[derive(Clone, Debug)]
pub struct LocateOutcome {
    pub runs: Vec<GeneratorRun>,
    /// Present when stage 2 ran for every generator.
    pub verdict: Option<SourceReport>,
}

/// Default ι from the stage-2 solutions, floored relative to the data scale.
pub fn iota_for(solutions: &[MapSolution], problems: &[&MapProblem]) -> f64 {
    let mut scale: Vec<f64> = problems
        .iter()
        .map(|p| {
            p.injection_bins
                .iter()
                .map(|&w| (p.spec.i[w].norm_sqr() + p.spec.phi[w].norm_sqr()).sqrt())
                .fold(0.0, f64::max)
        })
        .collect();
    scale.sort_by(f64::total_cmp);
    let floor = scale.get(scale.len() / 2).map_or(0.0, |s| IOTA_FLOOR * s);
    default_iota(solutions).max(floor)
}

/// Run the procedure on every generator (in parallel, merged in input order).
pub fn locate(inputs: &[GeneratorInput], settings: &LocateSettings) -> Result<LocateOutcome> {
    settings.validate()?;
    if inputs.is_empty() {
        return Err(Error::Config("no generators".into()));
    }
    let runs: Vec<GeneratorRun> = inputs
        .par_iter()
        .map(|input| {
            let t0 = Instant::now();
            let mut run = GeneratorRun {
                name: input.name.clone(),
                prepared: None,
                stage2: None,
                lambda: 0.0,
                error: None,
                seconds: 0.0,
            };
            match prepare(input, settings) {
                Ok(prep) => {
                    if settings.stage != StageMode::Stage1 {
                        run.lambda = settings.lambda0 * prep.lambda_unit;
                        match solve_stage2(&prep, settings.lambda0, &settings.solver) {
                            Ok(s) => run.stage2 = Some(s),
                            Err(e) => run.error = Some(e.to_string()),
                        }
                    }
                    run.prepared = Some(prep);
                }
                Err(e) => run.error = Some(e.to_string()),
            }
            run.seconds = t0.elapsed().as_secs_f64();
            run
        })
        .collect();
    let verdict = if runs.iter().all(|r| r.stage2.is_some()) {
        let sols: Vec<MapSolution> = runs.iter().map(|r| r.stage2.clone().unwrap()).collect();
        let problems: Vec<&MapProblem> = runs
            .iter()
            .map(|r| &r.prepared.as_ref().unwrap().stage2_problem)
            .collect();
        let iota = settings.iota.unwrap_or_else(|| iota_for(&sols, &problems));
        Some(locate_sources(&sols, iota))
    } else {
        None
    };
    Ok(LocateOutcome { runs, verdict })
}

/// How priors are drawn from the generating parameters: each free parameter is
/// scaled by `1 + U(lo, hi)/100`, and the prior std is `rel_std` of that mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub pct_range: (f64, f64),
    pub rel_std: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            pct_range: (-75.0, 75.0),
            rel_std: 0.5,
        }
    }
}

pub fn perturbed_priors(truth: &[GeneratorParams], spec: &PriorSpec, seed: u64) -> Result<Vec<ParamPrior>> {
    let mut rng = rng_stream(seed, Stream::Perturb);
    truth
        .iter()
        .map(|t| Ok(ParamPrior::relative(perturb_params(t, spec.pct_range, &mut rng)?, spec.rel_std)))
        .collect()
}

/// Inputs for a dataset read from disk.
pub fn inputs_from_recorded(ds: &RecordedDataset, spec: &PriorSpec, seed: u64) -> Result<Vec<GeneratorInput>> {
    let truth: Vec<GeneratorParams> = ds.meta.generators.iter().map(|g| g.truth.clone()).collect();
    let priors = perturbed_priors(&truth, spec, seed)?;
    Ok(ds
        .meta
        .generators
        .iter()
        .zip(&ds.windows)
        .zip(priors)
        .map(|((g, w), prior)| GeneratorInput {
            name: g.name.clone(),
            window: w.clone(),
            noise_var: g.noise_var,
            prior,
        })
        .collect())
}

/// Inputs for an in-memory simulation (noisy windows).
pub fn inputs_from_labeled(ds: &LabeledDataset, spec: &PriorSpec, seed: u64) -> Result<Vec<GeneratorInput>> {
    let priors = perturbed_priors(&ds.truth, spec, seed)?;
    Ok(ds
        .names
        .iter()
        .zip(&ds.noisy)
        .zip(&ds.noise_var)
        .zip(priors)
        .map(|(((n, w), nv), prior)| GeneratorInput {
            name: n.clone(),
            window: w.clone(),
            noise_var: *nv,
            prior,
        })
        .collect())
}

/// Bands from the ground-truth labels, one per distinct frequency.
pub fn label_bands(labels: &[FoLabel], halfwidth_hz: f64) -> Vec<BandSpec> {
    let mut out: Vec<BandSpec> = Vec::new();
    for l in labels {
        if !out.iter().any(|b| (b.freq_hz - l.freq_hz).abs() < 1e-12) {
            out.push(BandSpec {
                freq_hz: l.freq_hz,
                halfwidth_hz,
            });
        }
    }
    out
}

/// Stage 2 for every prepared generator at each `λ₀` in `lambda0s`. Returns one
/// row of solutions (in generator order) per `λ₀`.
pub fn lambda_sweep(prepared: &[Prepared], lambda0s: &[f64], solver: &SolverSettings) -> Result<Vec<Vec<MapSolution>>> {
    lambda0s
        .iter()
        .map(|&l0| {
            prepared
                .par_iter()
                .map(|p| solve_stage2(p, l0, solver))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Number of injection bins, over all generators, with `‖I‖ > iota`.
pub fn bins_above(solutions: &[MapSolution], iota: f64) -> usize {
    solutions
        .iter()
        .filter_map(|s| s.injections.as_ref())
        .map(|inj| inj.norms().into_iter().filter(|&n| n > iota).count())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ModelOrder;
    use crate::spectra::frequency_grid;
    use proptest::prelude::*;

    fn label(g: usize, f: f64) -> FoLabel {
        FoLabel {
            generator: g,
            name: format!("G{g}"),
            freq_hz: f,
            channel: crate::simkit::ForcingChannel::Torque,
        }
    }

    #[test]
    fn label_bands_merge_equal_frequencies() {
        let b = label_bands(&[label(0, 0.5), label(1, 0.5), label(2, 0.86)], 0.05);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].freq_hz, 0.86);
        assert!(label_bands(&[], 0.05).is_empty());
    }

    #[test]
    fn band_covers_requested_width() {
        let grid = frequency_grid(1200, 20.0);
        let m = masks(&grid, &[BandSpec { freq_hz: 0.5, halfwidth_hz: 0.05 }]).unwrap();
        let expect: Vec<usize> = (0..grid.len())
            .filter(|&w| (grid[w] / TAU - 0.5).abs() <= 0.05)
            .collect();
        assert_eq!(m[0].bins, expect);
    }

    #[test]
    fn settings_validation() {
        let ok = LocateSettings::default();
        assert!(ok.validate().is_ok());
        for bad in [
            LocateSettings { lambda0: -1.0, ..ok.clone() },
            LocateSettings { iota: Some(f64::NAN), ..ok.clone() },
            LocateSettings { dft_constant: 0.0, ..ok.clone() },
            LocateSettings { bands: vec![BandSpec { freq_hz: 0.0, halfwidth_hz: 0.1 }], ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn settings_json_fills_defaults() {
        let s: LocateSettings = serde_json::from_str(r#"{"lambda0": 2.0, "stage": "stage1"}"#).unwrap();
        assert_eq!(s.lambda0, 2.0);
        assert_eq!(s.stage, StageMode::Stage1);
        assert_eq!(s.dft_constant, DFT_CONSTANT_DEFAULT);
    }

    #[test]
    fn empty_input_is_a_config_error() {
        assert!(matches!(locate(&[], &LocateSettings::default()), Err(Error::Config(_))));
    }

    #[test]
    fn pd_input_is_left_alone() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(positive_definite(&h), h);
    }

    #[test]
    fn indefinite_input_gets_absolute_eigenvalues() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -3.0]);
        let p = positive_definite(&h);
        assert!((p[(0, 0)] - 1.0).abs() < 1e-14 && (p[(1, 1)] - 3.0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn projection_is_pd(v in prop::collection::vec(-10.0f64..10.0, 9)) {
            let a = DMatrix::from_row_slice(3, 3, &v);
            let p = positive_definite(&(&a + a.transpose()));
            prop_assert!(p.clone().cholesky().is_some() || p.iter().all(|x| *x == 0.0));
            prop_assert!((&p - p.transpose()).amax() <= 1e-12 * p.amax().max(1.0));
        }
    }

    #[test]
    fn classical_start_uses_implied_emf() {
        use crate::simkit::synthesize_linear;
        let sc = crate::simkit::fixtures::ten_gen(0);
        let mut sc = crate::simkit::SimScenario { duration: 10.0, ..sc };
        sc.noise.pmu_snr_db = None;
        let ds = synthesize_linear(&sc, 1e-3).unwrap();
        let truth = &ds.truth[0];
        assert_eq!(truth.model, ModelOrder::Classical2);
        let mut prior_mean = truth.clone();
        prior_mean.e_prime *= 0.5;
        let w = &ds.clean[0];
        let spec = SpectralDataset::from_window(w, [1e-8; 4]).unwrap();
        let ss = w.steady_state.unwrap();
        let model = GeneratorModel::new(prior_mean.clone(), TerminalCondition::from_phasors(ss[0], ss[1], ss[2], ss[3]));
        let prior = GaussianPrior::from_natural(&ParamPrior::relative(prior_mean, 0.5)).unwrap();
        let ps = ProblemSettings { lambda: 0.0, dft_constant: DFT_CONSTANT_DEFAULT };
        let p = assemble("G1", Stage::Stage1, model, spec, prior, vec![], &ps).unwrap();
        let starts = stage1_starts(&p, ss);
        assert_eq!(starts.len(), 2);
        let ie = p.model.free_params().iter().position(|&k| k == ParamKind::EPrime).unwrap();
        assert!((starts[1][ie].exp() / truth.e_prime - 1.0).abs() < 1e-9, "{}", starts[1][ie].exp());
    }
}
