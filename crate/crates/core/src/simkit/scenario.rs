//! Scenario description for the synthetic data generator.

use serde::{Deserialize, Serialize};

use crate::dynamics::{BusKind, GeneratorParams, Network};
use crate::error::SimError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRecord {
    pub name: String,
    pub bus: usize,
    pub params: GeneratorParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcingChannel {
    /// `τ_m = τ₀ (1 + a sin 2πft)`
    Torque,
    /// `V_ref = V_ref0 (1 + a sin 2πft)`
    AvrRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForcingSpec {
    /// Index into the scenario's generator list.
    pub generator: usize,
    pub channel: ForcingChannel,
    /// Relative amplitude.
    pub amplitude: f64,
    pub freq_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Std of the relative infinite-bus voltage magnitude noise.
    pub slack_v_std: f64,
    /// Std of the infinite-bus angle noise, rad.
    pub slack_theta_std: f64,
    /// Rate of the independent infinite-bus noise knots; the waveform is
    /// linearly interpolated between knots.
    pub slack_noise_rate_hz: f64,
    /// OU mean-reversion rate of the load noise, 1/s.
    pub ou_theta: f64,
    /// Stationary std of the relative load noise.
    pub ou_sigma: f64,
    /// PMU SNR in dB; `None` leaves the measurements clean.
    pub pmu_snr_db: Option<f64>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            slack_v_std: 0.005,
            slack_theta_std: 0.005,
            slack_noise_rate_hz: 100.0,
            ou_theta: 0.5,
            ou_sigma: 0.01,
            pmu_snr_db: Some(45.0),
        }
    }
}

impl NoiseSpec {
    pub fn silent() -> Self {
        Self {
            slack_v_std: 0.0,
            slack_theta_std: 0.0,
            ou_sigma: 0.0,
            pmu_snr_db: None,
            ..Self::default()
        }
    }
}

fn default_duration() -> f64 {
    120.0
}
fn default_dt() -> f64 {
    1e-3
}
fn default_fs() -> f64 {
    20.0
}
fn default_warmup() -> f64 {
    30.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub name: String,
    pub network: Network,
    pub generators: Vec<GeneratorRecord>,
    #[serde(default)]
    pub forcings: Vec<ForcingSpec>,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Recorded window length, s.
    #[serde(default = "default_duration")]
    pub duration: f64,
    /// Integration step, s.
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// PMU reporting rate, Hz.
    #[serde(default = "default_fs")]
    pub fs: f64,
    /// Simulated time discarded before the window, s.
    #[serde(default = "default_warmup")]
    pub warmup: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SimScenario {
    /// Samples in the recorded window, `duration·fs + 1`.
    pub fn n_samples(&self) -> usize {
        (self.duration * self.fs).round() as usize + 1
    }

    /// Integration steps per PMU sample.
    pub fn decimation(&self) -> usize {
        (1.0 / (self.fs * self.dt)).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        self.network.validate()?;
        if !(self.dt > 0.0 && self.fs > 0.0 && self.duration > 0.0 && self.warmup >= 0.0) {
            return bad("dt, fs and duration must be positive, warmup non-negative".into());
        }
        let r = 1.0 / (self.fs * self.dt);
        if (r - r.round()).abs() > 1e-9 || r.round() < 1.0 {
            return bad(format!("1/(fs·dt) = {r} is not an integer"));
        }
        let n = self.duration * self.fs;
        if (n - n.round()).abs() > 1e-9 {
            return bad("duration·fs is not an integer".into());
        }
        if self.n_samples() % 2 == 0 {
            return bad(format!("window has an even sample count {}", self.n_samples()));
        }
        let nb = self.network.n_buses();
        let mut used = vec![false; nb];
        for g in &self.generators {
            if g.bus >= nb {
                return bad(format!("generator {} on missing bus {}", g.name, g.bus));
            }
            if self.network.buses[g.bus].kind != BusKind::Pv {
                return bad(format!("generator {} must sit on a PV bus", g.name));
            }
            if std::mem::replace(&mut used[g.bus], true) {
                return bad(format!("two generators on bus {}", g.bus));
            }
            g.params.validate_physical().map_err(SimError::from)?;
        }
        if let Some((i, _)) = self
            .network
            .buses
            .iter()
            .enumerate()
            .find(|(i, b)| b.kind == BusKind::Pv && !used[*i])
        {
            return bad(format!("PV bus {i} has no generator"));
        }
        let nyq = 0.5 * self.fs;
        for f in &self.forcings {
            if f.generator >= self.generators.len() {
                return bad(format!("forcing on missing generator {}", f.generator));
            }
            if !(f.freq_hz > 0.0 && f.freq_hz < nyq) {
                return bad(format!("forcing frequency {} Hz outside (0, {nyq})", f.freq_hz));
            }
            if f.channel == ForcingChannel::AvrRef
                && self.generators[f.generator].params.model != crate::dynamics::ModelOrder::FluxDecay3
            {
                return bad("AVR reference forcing needs a flux-decay machine".into());
            }
            if !f.amplitude.is_finite() {
                return bad("non-finite forcing amplitude".into());
            }
        }
        let nz = &self.noise;
        let fin = [nz.slack_v_std, nz.slack_theta_std, nz.ou_sigma, nz.ou_theta, nz.slack_noise_rate_hz];
        if fin.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || nz.slack_noise_rate_hz <= 0.0 {
            return bad("noise settings must be finite and non-negative".into());
        }
        if nz.ou_sigma > 0.0 && nz.ou_theta <= 0.0 {
            return bad("OU load noise needs a positive rate".into());
        }
        if nz.pmu_snr_db.is_some_and(|s| s.is_nan()) {
            return bad("PMU SNR is NaN".into());
        }
        Ok(())
    }
}
