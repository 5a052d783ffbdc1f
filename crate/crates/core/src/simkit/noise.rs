//! Random inputs: OU load noise, PMU measurement noise, prior perturbation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};

use super::LabeledDataset;
use crate::dynamics::GeneratorParams;
use crate::error::SimError;

/// Independent random streams derived from one scenario seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    SlackNoise = 1,
    LoadNoise = 2,
    PmuNoise = 3,
    Perturb = 4,
    Synth = 5,
}

pub fn rng_stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

/// `dη = −θ η dt + σ √(2θ) dW`, stationary std `σ`, started at 0.
#[derive(Clone, Debug)]
pub struct OuProcess {
    pub theta: f64,
    pub sigma: f64,
    x: f64,
}

impl OuProcess {
    pub fn new(theta: f64, sigma: f64) -> Self {
        Self { theta, sigma, x: 0.0 }
    }

    pub fn value(&self) -> f64 {
        self.x
    }

    /// One Euler–Maruyama step.
    pub fn step<R: Rng>(&mut self, dt: f64, rng: &mut R) -> f64 {
        if self.sigma == 0.0 {
            return self.x;
        }
        let dw: f64 = rng.sample::<f64, _>(StandardNormal) * dt.sqrt();
        self.x += -self.theta * self.x * dt + self.sigma * (2.0 * self.theta).sqrt() * dw;
        self.x
    }
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
}

/// Mean-removed signal power per channel; angles referenced to the COI angle.
pub fn signal_power(channels: &[Vec<f64>; 4], coi: &[f64]) -> [f64; 4] {
    std::array::from_fn(|c| {
        if c == 1 || c == 3 {
            let rel: Vec<f64> = channels[c].iter().zip(coi).map(|(a, b)| a - b).collect();
            variance(&rel)
        } else {
            variance(&channels[c])
        }
    })
}

/// Add IID Gaussian noise so each channel's signal-to-noise power ratio is
/// `snr_db`. `None` (infinite SNR) leaves the data untouched.
pub fn add_pmu_noise(dataset: &mut LabeledDataset, snr_db: Option<f64>, seed: u64) -> Result<(), SimError> {
    let Some(snr) = snr_db else {
        dataset.noisy = dataset.clean.clone();
        dataset.noise_var = vec![[0.0; 4]; dataset.clean.len()];
        return Ok(());
    };
    if !snr.is_finite() {
        return Err(SimError::InvalidScenario(format!("SNR {snr} dB is not finite")));
    }
    let mut rng = rng_stream(seed, super::noise::Stream::PmuNoise);
    let ratio = 10f64.powf(snr / 10.0);
    dataset.noisy = dataset.clean.clone();
    dataset.noise_var.clear();
    for w in dataset.noisy.iter_mut() {
        let p = signal_power(&w.channels, &dataset.coi);
        let nv = p.map(|s| s / ratio);
        for (c, ch) in w.channels.iter_mut().enumerate() {
            let sd = nv[c].sqrt();
            for v in ch.iter_mut() {
                *v += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        dataset.noise_var.push(nv);
    }
    Ok(())
}

/// Multiply every free parameter by `1 + u/100`, `u ~ U(lo, hi)`.
pub fn perturb_params<R: Rng>(truth: &GeneratorParams, pct_range: (f64, f64), rng: &mut R) -> Result<GeneratorParams, SimError> {
    let (lo, hi) = pct_range;
    if !(lo > -100.0 && hi >= lo && hi.is_finite()) {
        return Err(SimError::InvalidScenario(format!("perturbation range ({lo}, {hi}) %")));
    }
    let mut out = truth.clone();
    for &k in truth.free_params() {
        let u = if hi > lo { rng.sample(Uniform::new(lo, hi).unwrap()) } else { lo };
        out.set(k, truth.get(k) * (1.0 + u / 100.0));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ModelOrder;

    fn params() -> GeneratorParams {
        GeneratorParams {
            model: ModelOrder::FluxDecay3,
            h: 3.0,
            d: 2.0,
            xd: 1.1,
            xd_prime: 0.25,
            xq: 0.8,
            td0_prime: 5.0,
            e_prime: 0.0,
            ka: 50.0,
            ta: 0.1,
        }
    }

    #[test]
    fn zero_range_returns_truth() {
        let mut r = rng_stream(1, Stream::Perturb);
        assert_eq!(perturb_params(&params(), (0.0, 0.0), &mut r).unwrap(), params());
    }

    #[test]
    fn same_seed_same_draw() {
        let a = perturb_params(&params(), (-75.0, 75.0), &mut rng_stream(9, Stream::Perturb)).unwrap();
        let b = perturb_params(&params(), (-75.0, 75.0), &mut rng_stream(9, Stream::Perturb)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_multiplier_is_one() {
        let mut r = rng_stream(3, Stream::Perturb);
        let base = params();
        let n = 10_000;
        let mut acc = vec![0.0; 8];
        for _ in 0..n {
            let p = perturb_params(&base, (-75.0, 75.0), &mut r).unwrap();
            for (a, (x, y)) in acc.iter_mut().zip(p.free_values().iter().zip(base.free_values())) {
                *a += x / y / n as f64;
                assert!(*x > 0.0);
            }
        }
        for a in acc {
            assert!((0.98..=1.02).contains(&a), "{a}");
        }
    }

    #[test]
    fn invalid_range_rejected() {
        let mut r = rng_stream(3, Stream::Perturb);
        assert!(perturb_params(&params(), (-100.0, 10.0), &mut r).is_err());
    }

    #[test]
    fn ou_stationary_moments() {
        // long run: variance σ² and lag-τ autocorrelation e^{−θτ}
        let (theta, sigma, dt) = (0.5, 0.01, 1e-2);
        let mut p = OuProcess::new(theta, sigma);
        let mut r = rng_stream(4, Stream::LoadNoise);
        for _ in 0..2000 {
            p.step(dt, &mut r);
        }
        let n = 2_000_000;
        let xs: Vec<f64> = (0..n).map(|_| p.step(dt, &mut r)).collect();
        let var = variance(&xs);
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "{}", var / (sigma * sigma));
        let lag = (1.0 / theta / dt) as usize;
        let m = xs.iter().sum::<f64>() / n as f64;
        let c: f64 = (0..n - lag).map(|i| (xs[i] - m) * (xs[i + lag] - m)).sum::<f64>() / (n - lag) as f64;
        // fitted rate from the lag-1/θ autocorrelation
        let fit = -(c / var).ln() / (lag as f64 * dt);
        assert!((fit / theta - 1.0).abs() < 0.1, "{fit}");
    }
}
