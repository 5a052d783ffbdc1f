//! Run configuration: a JSON file whose relative paths resolve against the
//! file's own directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use foloc::dynamics::ParamPrior;
use foloc::pipeline::{BandSpec, PriorSpec, StageMode};
use foloc::simkit::fixtures::{four_bus, ten_gen};
use foloc::simkit::SimScenario;
use foloc::solver::SolverSettings;
use foloc::spectra::{DFT_CONSTANT_DEFAULT, DFT_CONSTANT_PAPER};

/// Invalid or inconsistent configuration; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub const DEFAULT_HALFWIDTH_HZ: f64 = 0.05;

fn default_halfwidth() -> f64 {
    DEFAULT_HALFWIDTH_HZ
}

fn default_lambda0() -> f64 {
    foloc::pipeline::DEFAULT_LAMBDA0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DftMode {
    #[default]
    Default,
    Paper,
}

impl DftMode {
    pub fn constant(&self) -> f64 {
        match self {
            DftMode::Default => DFT_CONSTANT_DEFAULT,
            DftMode::Paper => DFT_CONSTANT_PAPER,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory: written by `simulate`, read by `locate`.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Built-in scenario name (`four_bus`, `ten_gen`) or a scenario JSON file.
    #[serde(default)]
    pub scenario: Option<String>,
    /// Per-generator priors keyed by generator name. Without it, priors are
    /// perturbed from the recorded truth per `prior`.
    #[serde(default)]
    pub priors: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Declared FO bands. Without it, the bands come from the dataset labels.
    #[serde(default)]
    pub bands: Option<Vec<BandSpec>>,
    #[serde(default = "default_halfwidth")]
    pub band_halfwidth_hz: f64,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default = "default_lambda0")]
    pub lambda0: f64,
    #[serde(default)]
    pub iota: Option<f64>,
    #[serde(default)]
    pub dft: DftMode,
    #[serde(default)]
    pub stage: StageMode,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        rebase(&mut cfg.data_dir);
        rebase(&mut cfg.priors);
        rebase(&mut cfg.output_dir);
        if let Some(s) = cfg.scenario.as_mut() {
            if builtin(s, 0).is_none() && Path::new(s).is_relative() {
                *s = base.join(&*s).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn data_dir(&self) -> anyhow::Result<&Path> {
        self.data_dir.as_deref().ok_or_else(|| config_err("no data directory given"))
    }

    pub fn output_dir(&self) -> anyhow::Result<&Path> {
        self.output_dir.as_deref().ok_or_else(|| config_err("no output directory given"))
    }

    /// The scenario to simulate; `seed` overrides the one stored in a file.
    pub fn scenario(&self) -> anyhow::Result<SimScenario> {
        let name = self.scenario.as_deref().ok_or_else(|| config_err("no scenario given"))?;
        if let Some(sc) = builtin(name, self.seed.unwrap_or(0)) {
            return Ok(sc);
        }
        let path = Path::new(name);
        if !path.is_file() {
            return Err(config_err(format!(
                "scenario '{name}' is neither a built-in (four_bus, ten_gen) nor an existing file"
            )));
        }
        let mut sc: SimScenario = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        if let Some(seed) = self.seed {
            sc.seed = seed;
        }
        Ok(sc)
    }

    pub fn priors(&self) -> anyhow::Result<Option<BTreeMap<String, ParamPrior>>> {
        let Some(path) = &self.priors else { return Ok(None) };
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let map = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Ok(Some(map))
    }
}

pub fn builtin(name: &str, seed: u64) -> Option<SimScenario> {
    match name {
        "four_bus" => Some(four_bus(seed)),
        "ten_gen" => Some(ten_gen(seed)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.band_halfwidth_hz, DEFAULT_HALFWIDTH_HZ);
        assert_eq!(c.lambda0, foloc::pipeline::DEFAULT_LAMBDA0);
        assert_eq!(c.dft.constant(), DFT_CONSTANT_DEFAULT);
        assert!(c.bands.is_none() && c.seed.is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"lamda0": 3}"#).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(&p, r#"{"data_dir": "data", "output_dir": "/abs/out", "scenario": "four_bus"}"#).unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.data_dir.unwrap(), dir.path().join("data"));
        assert_eq!(c.output_dir.unwrap(), PathBuf::from("/abs/out"));
        assert_eq!(c.scenario.unwrap(), "four_bus");
    }

    #[test]
    fn unknown_scenario_is_a_config_error() {
        let c = RunConfig {
            scenario: Some("nine_bus".into()),
            ..Default::default()
        };
        assert!(c.scenario().unwrap_err().downcast_ref::<ConfigError>().is_some());
    }
}
