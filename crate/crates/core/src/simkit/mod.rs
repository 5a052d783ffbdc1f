//! Labeled synthetic PMU data: multi-machine simulation with forced oscillations,
//! ambient excitation and PMU noise.

pub mod fixtures;
pub mod io;
pub mod noise;
pub mod scenario;
pub mod simulate;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::dynamics::GeneratorParams;
use crate::error::SimError;
use crate::spectra::PmuWindow;

pub use noise::{add_pmu_noise, perturb_params, rng_stream, signal_power, OuProcess, Stream};
pub use scenario::{ForcingChannel, ForcingSpec, GeneratorRecord, NoiseSpec, SimScenario};
pub use simulate::operating_point;
pub use synth::{probe_admittance, synthesize_linear};

/// Ground truth for one forced oscillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoLabel {
    pub generator: usize,
    pub name: String,
    pub freq_hz: f64,
    pub channel: ForcingChannel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub scenario: String,
    pub fs: f64,
    pub names: Vec<String>,
    pub noisy: Vec<PmuWindow>,
    pub clean: Vec<PmuWindow>,
    /// Parameters the data was generated with.
    pub truth: Vec<GeneratorParams>,
    pub labels: Vec<FoLabel>,
    /// PMU noise variance per generator and channel `[V, θ, I, φ]`.
    pub noise_var: Vec<[f64; 4]>,
    /// Centre-of-inertia angle at the window samples.
    pub coi: Vec<f64>,
}

impl LabeledDataset {
    pub fn n_generators(&self) -> usize {
        self.names.len()
    }

    pub fn is_source(&self, generator: usize) -> bool {
        self.labels.iter().any(|l| l.generator == generator)
    }
}

fn labels(sc: &SimScenario) -> Vec<FoLabel> {
    sc.forcings
        .iter()
        .map(|f| FoLabel {
            generator: f.generator,
            name: sc.generators[f.generator].name.clone(),
            freq_hz: f.freq_hz,
            channel: f.channel,
        })
        .collect()
}

/// Run the nonlinear simulation and record the PMU window.
pub fn simulate(sc: &SimScenario) -> Result<LabeledDataset, SimError> {
    use simulate::{filter_at, integrate, lowpass_taps, FIR_CUTOFF_FRACTION, FIR_HALF_SECONDS};
    sc.validate()?;
    let dt = sc.dt;
    let r = sc.decimation();
    let half = (FIR_HALF_SECONDS / dt).round() as usize;
    let t_keep = (sc.warmup - half as f64 * dt).max(0.0);
    let t_end = sc.warmup + sc.duration + half as f64 * dt;
    let (traj, inits) = integrate(sc, t_keep, t_end)?;
    let taps = lowpass_taps(half, FIR_CUTOFF_FRACTION * 0.5 * sc.fs, dt);
    let n = sc.n_samples();
    let offset = ((sc.warmup - traj.t0) / dt).round() as usize;
    let at = || (0..n).map(move |j| offset + j * r);
    let t: Vec<f64> = (0..n).map(|j| j as f64 / sc.fs).collect();
    let clean: Vec<PmuWindow> = traj
        .signals
        .iter()
        .zip(&inits)
        .map(|(sig, init)| {
            let e = &init.eq;
            PmuWindow {
                fs: sc.fs,
                t: t.clone(),
                channels: std::array::from_fn(|c| filter_at(&sig[c], &taps, at())),
                steady_state: Some([e.v0, e.theta0, e.i0, e.phi0]),
            }
        })
        .collect();
    let mut ds = LabeledDataset {
        scenario: sc.name.clone(),
        fs: sc.fs,
        names: sc.generators.iter().map(|g| g.name.clone()).collect(),
        noisy: Vec::new(),
        clean,
        truth: inits.into_iter().map(|i| i.params).collect(),
        labels: labels(sc),
        noise_var: Vec::new(),
        coi: filter_at(&traj.coi, &taps, at()),
    };
    add_pmu_noise(&mut ds, sc.noise.pmu_snr_db, sc.seed)?;
    Ok(ds)
}
