//! Run report: what was asked, what each generator's estimate came out as, the
//! verdict, and the tables the figures are drawn from. Versioned JSON; figure
//! CSVs are regenerated from a report alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bayes::MapProblem;
use crate::error::{Error, Result};
use crate::pipeline::{predict, GeneratorRun, LocateOutcome, LocateSettings};
use crate::solver::MapSolution;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub tool_version: String,
    /// Dataset directory or scenario name the run was made on.
    pub dataset: String,
    pub settings: LocateSettings,
    /// Threshold used for the verdict; absent when some generator failed.
    pub iota: Option<f64>,
    /// Flagged generators, largest `‖I‖∞` first.
    pub sources: Vec<String>,
    pub generators: Vec<GeneratorReport>,
    pub timings: Timings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub per_generator: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    /// Natural-unit parameters by label.
    pub params: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionRow {
    pub bin: usize,
    pub freq_hz: f64,
    /// `[Re I_I, Im I_I, Re I_φ, Im I_φ]`.
    pub value: [f64; 4],
    pub norm: f64,
}

/// Per-bin spectra over all non-DC bins. Predicted magnitudes are `|Y [Ṽ; θ̃]|`
/// without injections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectraTable {
    pub bin: Vec<usize>,
    pub freq_hz: Vec<f64>,
    pub in_band: Vec<bool>,
    pub measured_i: Vec<f64>,
    pub measured_phi: Vec<f64>,
    /// Keyed by `prior`, `stage1`, `stage2`.
    pub predicted_i: BTreeMap<String, Vec<f64>>,
    pub predicted_phi: BTreeMap<String, Vec<f64>>,
    pub prediction_error: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub name: String,
    pub error: Option<String>,
    pub converged: bool,
    pub lambda: f64,
    pub prior: BTreeMap<String, f64>,
    pub stage1: Option<StageSummary>,
    pub stage2: Option<StageSummary>,
    pub injections: Vec<InjectionRow>,
    pub max_norm: f64,
    pub is_source: bool,
    /// Median prediction error over out-of-band bins, keyed like the spectra table.
    pub median_out_of_band_error: BTreeMap<String, f64>,
    pub spectra: SpectraTable,
}

fn named_params(problem: &MapProblem, theta: &[f64]) -> BTreeMap<String, f64> {
    problem
        .model
        .free_params()
        .iter()
        .zip(theta)
        .map(|(k, t)| (k.label().to_string(), t.exp()))
        .collect()
}

fn summary(problem: &MapProblem, s: &MapSolution) -> StageSummary {
    StageSummary {
        objective: s.objective,
        iterations: s.iterations,
        converged: s.converged,
        gradient_norm: s.gradient_norm,
        params: named_params(problem, &s.theta),
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    v.retain(|x| x.is_finite());
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn generator_report(run: &GeneratorRun, iota: Option<f64>) -> GeneratorReport {
    let mut out = GeneratorReport {
        name: run.name.clone(),
        error: run.error.clone(),
        converged: run.converged(),
        lambda: run.lambda,
        prior: BTreeMap::new(),
        stage1: None,
        stage2: None,
        injections: Vec::new(),
        max_norm: 0.0,
        is_source: false,
        median_out_of_band_error: BTreeMap::new(),
        spectra: SpectraTable::default(),
    };
    let Some(prep) = &run.prepared else {
        return out;
    };
    let p = &prep.stage2_problem;
    out.prior = named_params(p, &prep.prior_theta);
    out.stage1 = prep.stage1.as_ref().map(|s| summary(p, s));
    out.stage2 = run.stage2.as_ref().map(|s| summary(p, s));

    let grid = &p.spec.grid;
    let hz = |w: usize| grid[w] / std::f64::consts::TAU;
    if let Some(inj) = run.stage2.as_ref().and_then(|s| s.injections.as_ref()) {
        for (&bin, v) in inj.bins.iter().zip(&inj.values) {
            out.injections.push(InjectionRow {
                bin,
                freq_hz: hz(bin),
                value: *v,
                norm: v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            });
        }
    }
    out.max_norm = out.injections.iter().map(|r| r.norm).fold(0.0, f64::max);
    out.is_source = iota.is_some_and(|i| out.max_norm > i);

    let t = &mut out.spectra;
    t.bin = p.data_bins.clone();
    t.freq_hz = p.data_bins.iter().map(|&w| hz(w)).collect();
    t.in_band = p.data_bins.iter().map(|w| p.injection_bins.contains(w)).collect();
    t.measured_i = p.data_bins.iter().map(|&w| p.spec.i[w].norm()).collect();
    t.measured_phi = p.data_bins.iter().map(|&w| p.spec.phi[w].norm()).collect();
    let points = [
        ("prior", Some(prep.prior_theta.as_slice())),
        ("stage1", prep.stage1.as_ref().map(|s| s.theta.as_slice())),
        ("stage2", run.stage2.as_ref().map(|s| s.theta.as_slice())),
    ];
    for (key, theta) in points {
        let Some(theta) = theta else { continue };
        let Ok(pred) = predict(p, theta) else { continue };
        t.predicted_i
            .insert(key.into(), pred.predicted.iter().map(|q| q[0].hypot(q[1])).collect());
        t.predicted_phi
            .insert(key.into(), pred.predicted.iter().map(|q| q[2].hypot(q[3])).collect());
        let oob: Vec<f64> = pred
            .error
            .iter()
            .zip(&t.in_band)
            .filter(|(_, b)| !**b)
            .map(|(e, _)| *e)
            .collect();
        if let Some(m) = median(oob) {
            out.median_out_of_band_error.insert(key.into(), m);
        }
        t.prediction_error.insert(key.into(), pred.error);
    }
    out
}

impl Report {
    pub fn build(dataset: &str, settings: &LocateSettings, outcome: &LocateOutcome, total_seconds: f64) -> Self {
        let iota = outcome.verdict.as_ref().map(|v| v.iota);
        Report {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset: dataset.to_string(),
            settings: settings.clone(),
            iota,
            sources: outcome.verdict.as_ref().map(|v| v.sources.clone()).unwrap_or_default(),
            generators: outcome.runs.iter().map(|r| generator_report(r, iota)).collect(),
            timings: Timings {
                total_seconds,
                per_generator: outcome.runs.iter().map(|r| (r.name.clone(), r.seconds)).collect(),
            },
        }
    }

    /// Copy with wall-clock timings zeroed; everything else is a function of the
    /// inputs alone, so two runs on the same data compare equal.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.timings.total_seconds = 0.0;
        for v in r.timings.per_generator.values_mut() {
            *v = 0.0;
        }
        r
    }

    pub fn all_converged(&self) -> bool {
        self.generators.iter().all(|g| g.converged)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Report = serde_json::from_str(s)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "report schema version {} (expected {SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Plain-text summary table.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset: {}", self.dataset);
        match self.iota {
            Some(i) => {
                let _ = writeln!(s, "iota: {i:.4e}");
            }
            None => {
                let _ = writeln!(s, "iota: n/a (some generators failed)");
            }
        }
        let _ = writeln!(
            s,
            "{:<10} {:>12} {:>10} {:>10} {:>10} {:>6} {:>9}",
            "generator", "max |I|", "pe prior", "pe st1", "pe st2", "source", "converged"
        );
        let pe = |g: &GeneratorReport, k: &str| {
            g.median_out_of_band_error
                .get(k)
                .map_or("-".to_string(), |v| format!("{v:.4}"))
        };
        for g in &self.generators {
            let _ = writeln!(
                s,
                "{:<10} {:>12.4e} {:>10} {:>10} {:>10} {:>6} {:>9}",
                g.name,
                g.max_norm,
                pe(g, "prior"),
                pe(g, "stage1"),
                pe(g, "stage2"),
                if g.is_source { "yes" } else { "no" },
                if g.converged { "yes" } else { "no" },
            );
            if let Some(e) = &g.error {
                let _ = writeln!(s, "  error: {e}");
            }
        }
        let _ = writeln!(
            s,
            "sources: {}",
            if self.sources.is_empty() { "none".to_string() } else { self.sources.join(", ") }
        );
        let _ = writeln!(s, "total time: {:.2} s", self.timings.total_seconds);
        s
    }

    /// Write `spectra_<generator>.csv` per generator and `injections.csv`.
    pub fn write_figure_tables(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let keys = ["prior", "stage1", "stage2"];
        let mut written = Vec::new();
        for g in &self.generators {
            let t = &g.spectra;
            if t.bin.is_empty() {
                continue;
            }
            let path = dir.join(format!("spectra_{}.csv", g.name));
            let mut w = csv::Writer::from_path(&path)?;
            let mut header = vec!["bin", "freq_hz", "in_band", "measured_i", "measured_phi"]
                .into_iter()
                .map(String::from)
                .collect::<Vec<_>>();
            let present: Vec<&str> = keys.iter().copied().filter(|k| t.prediction_error.contains_key(*k)).collect();
            for k in &present {
                header.push(format!("{k}_i"));
                header.push(format!("{k}_phi"));
                header.push(format!("{k}_error"));
            }
            w.write_record(&header)?;
            for r in 0..t.bin.len() {
                let mut row = vec![
                    t.bin[r].to_string(),
                    t.freq_hz[r].to_string(),
                    (t.in_band[r] as u8).to_string(),
                    t.measured_i[r].to_string(),
                    t.measured_phi[r].to_string(),
                ];
                for k in &present {
                    row.push(t.predicted_i[*k][r].to_string());
                    row.push(t.predicted_phi[*k][r].to_string());
                    row.push(t.prediction_error[*k][r].to_string());
                }
                w.write_record(&row)?;
            }
            w.flush()?;
            written.push(path);
        }
        let path = dir.join("injections.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["generator", "bin", "freq_hz", "i_re", "i_im", "phi_re", "phi_im", "norm"])?;
        for g in &self.generators {
            for r in &g.injections {
                w.write_record([
                    g.name.clone(),
                    r.bin.to_string(),
                    r.freq_hz.to_string(),
                    r.value[0].to_string(),
                    r.value[1].to_string(),
                    r.value[2].to_string(),
                    r.value[3].to_string(),
                    r.norm.to_string(),
                ])?;
            }
        }
        w.flush()?;
        written.push(path);
        Ok(written)
    }
}
