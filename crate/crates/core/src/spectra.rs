//! Deviation signals, single-sided DFT spectra on the `2K+1` point grid, and FO band masks.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::SpectraError;

/// Channel order used throughout: terminal voltage magnitude and angle, current
/// magnitude and angle.
pub const CHANNELS: [&str; 4] = ["V", "theta", "I", "phi"];

/// Multiplier `c` in the per-component DFT noise variance `c (2K+1) σ²`.
pub const DFT_CONSTANT_DEFAULT: f64 = 0.5;
/// The value printed in the source derivation, kept for reproduction runs.
pub const DFT_CONSTANT_PAPER: f64 = 2.0;

/// `2K+1` equally spaced samples of the four terminal channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmuWindow {
    pub fs: f64,
    pub t: Vec<f64>,
    /// `[V, θ, I, φ]`, each of length `2K+1`.
    pub channels: [Vec<f64>; 4],
    /// Pre-window operating point; the window means are used when absent.
    pub steady_state: Option<[f64; 4]>,
}

impl PmuWindow {
    pub fn new(
        fs: f64,
        t: Vec<f64>,
        channels: [Vec<f64>; 4],
        steady_state: Option<[f64; 4]>,
    ) -> Result<Self, SpectraError> {
        let w = Self {
            fs,
            t,
            channels,
            steady_state,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), SpectraError> {
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(SpectraError::InvalidSampleRate(self.fs));
        }
        let n = self.t.len();
        if n % 2 == 0 {
            return Err(SpectraError::EvenSampleCount(n));
        }
        for ch in &self.channels {
            if ch.len() != n {
                return Err(SpectraError::MissingSample(ch.len().min(n)));
            }
            if let Some(r) = ch.iter().position(|x| !x.is_finite()) {
                return Err(SpectraError::MissingSample(r));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// `K` for a window of `2K+1` samples.
    pub fn k(&self) -> usize {
        self.len() / 2
    }

    pub fn means(&self) -> [f64; 4] {
        let n = self.len().max(1) as f64;
        std::array::from_fn(|c| self.channels[c].iter().sum::<f64>() / n)
    }

    /// Read a `t,V,theta,I,phi` CSV. Rows must be consecutive samples at `fs`.
    pub fn read_csv(path: impl AsRef<Path>, fs: f64) -> Result<Self, SpectraError> {
        let ingest = |e: csv::Error| SpectraError::Ingest(e.to_string());
        let mut rdr = csv::Reader::from_path(path.as_ref()).map_err(ingest)?;
        let headers = rdr.headers().map_err(ingest)?.clone();
        let expected = ["t", "V", "theta", "I", "phi"];
        if headers.iter().map(str::trim).ne(expected) {
            return Err(SpectraError::Ingest(format!(
                "expected header t,V,theta,I,phi, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut t = Vec::new();
        let mut ch: [Vec<f64>; 4] = Default::default();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(ingest)?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().unwrap_or(f64::NAN))
                .collect();
            if vals.len() != 5 || vals.iter().any(|v| !v.is_finite()) {
                return Err(SpectraError::MissingSample(row));
            }
            if let Some(&prev) = t.last() {
                let gap: f64 = vals[0] - prev;
                if (gap * fs - 1.0).abs() > 1e-6 {
                    return Err(SpectraError::MissingSample(row));
                }
            }
            t.push(vals[0]);
            for c in 0..4 {
                ch[c].push(vals[c + 1]);
            }
        }
        Self::new(fs, t, ch, None)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "V", "theta", "I", "phi"])?;
        for r in 0..self.len() {
            w.write_record(
                std::iter::once(self.t[r])
                    .chain(self.channels.iter().map(|c| c[r]))
                    .map(|x| format!("{x:.17e}")),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-channel deviation from the steady state (or the window mean).
pub fn deviations(window: &PmuWindow) -> [Vec<f64>; 4] {
    let ss = window.steady_state.unwrap_or_else(|| window.means());
    std::array::from_fn(|c| window.channels[c].iter().map(|x| x - ss[c]).collect())
}

/// Single-sided DFT `X[w] = Σ_n x[n] e^{-j2πwn/(2K+1)}`, `w = 0..=K`.
pub fn dft(x: &[f64]) -> Result<Vec<Complex64>, SpectraError> {
    let n = x.len();
    if n % 2 == 0 {
        return Err(SpectraError::EvenSampleCount(n));
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf.truncate(n / 2 + 1);
    Ok(buf)
}

/// `Ω_w = 2π w f_s / (2K+1)` for `w = 0..=K`, in rad/s.
pub fn frequency_grid(k: usize, fs: f64) -> Vec<f64> {
    let n = (2 * k + 1) as f64;
    (0..=k).map(|w| 2.0 * PI * w as f64 * fs / n).collect()
}

/// Contiguous grid bins carrying the energy of one forced oscillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandMask {
    pub omega_d: f64,
    pub omega_r: f64,
    pub bins: Vec<usize>,
}

impl BandMask {
    pub fn contains(&self, bin: usize) -> bool {
        self.bins.binary_search(&bin).is_ok()
    }
}

/// Bins whose frequency lies in `[Ω_d − Ω_r, Ω_d + Ω_r]`. A relative slack of
/// 1e-9 of the grid spacing absorbs rounding for on-grid edges.
pub fn band_mask(grid: &[f64], omega_d: f64, omega_r: f64) -> Result<BandMask, SpectraError> {
    let top = grid.last().copied().unwrap_or(0.0);
    if !(omega_d > 0.0 && omega_d <= top * (1.0 + 1e-12)) {
        return Err(SpectraError::BandOutOfRange(omega_d));
    }
    let (lo, hi) = (omega_d - omega_r.abs(), omega_d + omega_r.abs());
    let eps = if grid.len() > 1 { 1e-9 * grid[1] } else { 0.0 };
    let bins: Vec<usize> = grid
        .iter()
        .enumerate()
        .filter(|(_, &w)| w >= lo - eps && w <= hi + eps)
        .map(|(i, _)| i)
        .collect();
    if bins.is_empty() {
        return Err(SpectraError::EmptyBand { lo, hi });
    }
    Ok(BandMask {
        omega_d,
        omega_r: omega_r.abs(),
        bins,
    })
}

/// Variance of the real (and of the imaginary) part of one DFT bin of white
/// noise with time-domain variance `sigma2`.
pub fn noise_spectral_variance(sigma2: f64, k: usize, constant: f64) -> f64 {
    constant * (2 * k + 1) as f64 * sigma2
}

/// Spectra of the four deviation channels of one generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralDataset {
    pub grid: Vec<f64>,
    pub v: Vec<Complex64>,
    pub theta: Vec<Complex64>,
    pub i: Vec<Complex64>,
    pub phi: Vec<Complex64>,
    /// Time-domain PMU noise variance per channel `[V, θ, I, φ]`.
    pub noise_var: [f64; 4],
    /// Number of samples `2K+1` the spectra came from.
    pub n_samples: usize,
}

impl SpectralDataset {
    pub fn from_window(window: &PmuWindow, noise_var: [f64; 4]) -> Result<Self, SpectraError> {
        window.validate()?;
        let dev = deviations(window);
        let [v, theta, i, phi] = [&dev[0], &dev[1], &dev[2], &dev[3]].map(|d| dft(d));
        Ok(Self {
            grid: frequency_grid(window.k(), window.fs),
            v: v?,
            theta: theta?,
            i: i?,
            phi: phi?,
            noise_var,
            n_samples: window.len(),
        })
    }

    pub fn k(&self) -> usize {
        self.n_samples / 2
    }

    /// Per-component spectral noise variances `[V, θ, I, φ]`.
    pub fn spectral_var(&self, constant: f64) -> [f64; 4] {
        self.noise_var
            .map(|s| noise_spectral_variance(s, self.k(), constant))
    }

    /// Every bin except DC.
    pub fn non_dc_bins(&self) -> Vec<usize> {
        (1..self.grid.len()).collect()
    }
}
