//! Frequency-domain synthesizer built on the generators' own FRFs, and a
//! single-machine sinusoidal probe of the nonlinear equations.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::Rng;
use rustfft::FftPlanner;

use super::noise::{add_pmu_noise, rng_stream, Stream};
use super::{labels, operating_point, LabeledDataset, SimScenario};
use crate::dynamics::machine;
use crate::dynamics::params::ParamSet;
use crate::dynamics::{frf, solve_equilibrium, GeneratorModel, GeneratorParams, TerminalCondition};
use crate::error::SimError;
use crate::spectra::{frequency_grid, PmuWindow};

/// Real sequence of length `n` whose unnormalised DFT has single-sided bins `x`
/// (`x[0]` is the DC bin).
fn inverse_real_dft(x: &[Complex64], n: usize) -> Vec<f64> {
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    for (w, v) in x.iter().enumerate() {
        full[w] = *v;
        if w > 0 {
            full[n - w] = v.conj();
        }
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut full);
    full.iter().map(|z| z.re / n as f64).collect()
}

/// Terminal-driven data from each generator's linear model: random voltage
/// spectra at every bin, currents `Ĩ = Y Ṽ` exactly, plus a current-magnitude
/// tone of relative size `amplitude` at each forced generator's nearest bin.
/// `excitation` scales the voltage spectra (relative deviation at low frequency).
pub fn synthesize_linear(sc: &SimScenario, excitation: f64) -> Result<LabeledDataset, SimError> {
    sc.validate()?;
    let (_, inits) = operating_point(sc)?;
    let n = sc.n_samples();
    let k = n / 2;
    let grid = frequency_grid(k, sc.fs);
    let mut rng = rng_stream(sc.seed, Stream::Synth);
    let t: Vec<f64> = (0..n).map(|j| j as f64 / sc.fs).collect();
    let mut clean = Vec::with_capacity(inits.len());
    for (g, init) in inits.iter().enumerate() {
        let e = &init.eq;
        let term = TerminalCondition { p: e.p, q: e.q, v: e.v0, theta: e.theta0 };
        let gm = GeneratorModel::new(init.params.clone(), term);
        let lin = gm.linear_model(&gm.log_params())?;
        let y = frf(&lin, &grid[1..])?;
        let zero = Complex64::new(0.0, 0.0);
        let mut spec = [vec![zero; k + 1], vec![zero; k + 1], vec![zero; k + 1], vec![zero; k + 1]];
        for w in 1..=k {
            let amp = excitation * n as f64 / (1.0 + grid[w]);
            let mut draw = || Complex64::from_polar(amp * rng.random_range(0.5..1.0), rng.random_range(0.0..TAU));
            let (v, th) = (draw(), draw());
            let yw = y.y[w - 1];
            spec[0][w] = v;
            spec[1][w] = th;
            spec[2][w] = yw[(0, 0)] * v + yw[(0, 1)] * th;
            spec[3][w] = yw[(1, 0)] * v + yw[(1, 1)] * th;
        }
        for f in sc.forcings.iter().filter(|f| f.generator == g) {
            let w = ((TAU * f.freq_hz) / grid[1]).round() as usize;
            if (1..=k).contains(&w) {
                spec[2][w] += Complex64::new(0.0, -0.5 * n as f64 * f.amplitude * e.i0);
            }
        }
        let steady = [e.v0, e.theta0, e.i0, e.phi0];
        clean.push(PmuWindow {
            fs: sc.fs,
            t: t.clone(),
            channels: std::array::from_fn(|c| inverse_real_dft(&spec[c], n).into_iter().map(|x| x + steady[c]).collect()),
            steady_state: Some(steady),
        });
    }
    let mut ds = LabeledDataset {
        scenario: sc.name.clone(),
        fs: sc.fs,
        names: sc.generators.iter().map(|g| g.name.clone()).collect(),
        noisy: Vec::new(),
        clean,
        truth: inits.into_iter().map(|i| i.params).collect(),
        labels: labels(sc),
        noise_var: Vec::new(),
        coi: vec![0.0; n],
    };
    add_pmu_noise(&mut ds, sc.noise.pmu_snr_db, sc.seed)?;
    Ok(ds)
}

/// Drive one machine's nonlinear equations with a small sinusoid on terminal
/// input `input` (0 = voltage magnitude, 1 = angle) at `freq_hz` and return the
/// ratio of output phasors `[I, φ]` to the input phasor: column `input` of Y.
pub fn probe_admittance(
    params: &GeneratorParams,
    term: &TerminalCondition,
    freq_hz: f64,
    amplitude: f64,
    input: usize,
) -> Result<[Complex64; 2], SimError> {
    let eq = solve_equilibrium(params, term)?;
    let p = ParamSet::<f64>::lift(params);
    let model = params.model;
    let omega = TAU * freq_hz;
    let dt = 1e-3;
    let period = 1.0 / freq_hz;
    let settle_periods = (120.0 / period).ceil();
    let measure_periods = (40.0 / period).ceil();
    let steps_per_period = (period / dt).round() as usize;
    let h = period / steps_per_period as f64;
    let drive = |t: f64| {
        let s = amplitude * (omega * t).sin();
        if input == 0 {
            (eq.v0 + s, eq.theta0)
        } else {
            (eq.v0, eq.theta0 + s)
        }
    };
    let f = |t: f64, x: &[f64]| {
        let (v, th) = drive(t);
        machine::rhs(model, &p, x, v, th, eq.tm0, eq.vref0)
    };
    let mut x = eq.states();
    let n_settle = settle_periods as usize * steps_per_period;
    let n_meas = measure_periods as usize * steps_per_period;
    let mut acc = [Complex64::new(0.0, 0.0); 2];
    let mut t = 0.0;
    for step in 0..n_settle + n_meas {
        // classical RK4
        let k1 = f(t, &x);
        let x2: Vec<f64> = x.iter().zip(&k1).map(|(a, b)| a + 0.5 * h * b).collect();
        let k2 = f(t + 0.5 * h, &x2);
        let x3: Vec<f64> = x.iter().zip(&k2).map(|(a, b)| a + 0.5 * h * b).collect();
        let k3 = f(t + 0.5 * h, &x3);
        let x4: Vec<f64> = x.iter().zip(&k3).map(|(a, b)| a + h * b).collect();
        let k4 = f(t + h, &x4);
        for i in 0..x.len() {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t += h;
        if step >= n_settle {
            let (v, th) = drive(t);
            let (i, phi) = machine::current_polar(model, &p, &x, v, th);
            let rot = Complex64::from_polar(1.0, -omega * t);
            acc[0] += (i - eq.i0) * rot;
            acc[1] += (phi - eq.phi0) * rot;
        }
    }
    // a sin(Ωt) has phasor −j a under X = (2/T) ∫ x e^{−jΩt} dt
    let scale = 2.0 / n_meas as f64;
    let u = Complex64::new(0.0, -amplitude);
    Ok([acc[0] * scale / u, acc[1] * scale / u])
}
