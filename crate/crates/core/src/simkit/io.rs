//! On-disk dataset layout: one `t,V,theta,I,phi` CSV per generator plus a
//! `labels.json` with ground truth and noise levels.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FoLabel, LabeledDataset};
use crate::dynamics::GeneratorParams;
use crate::error::{Error, Result};
use crate::spectra::PmuWindow;

pub const LABELS_FILE: &str = "labels.json";

/// Contents of `labels.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub scenario: String,
    pub fs: f64,
    pub generators: Vec<GeneratorEntry>,
    pub labels: Vec<FoLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEntry {
    pub name: String,
    /// CSV file name relative to the dataset directory.
    pub file: String,
    pub truth: GeneratorParams,
    pub noise_var: [f64; 4],
    pub steady_state: Option<[f64; 4]>,
}

/// A dataset as read back from disk: noisy windows only.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordedDataset {
    pub meta: DatasetMeta,
    pub windows: Vec<PmuWindow>,
}

fn csv_name(name: &str) -> String {
    format!("{name}.csv")
}

/// Write the noisy windows and labels into `dir`, creating it if needed.
/// Returns the paths written.
pub fn write_dataset(ds: &LabeledDataset, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut generators = Vec::new();
    for (g, w) in ds.noisy.iter().enumerate() {
        let file = csv_name(&ds.names[g]);
        let path = dir.join(&file);
        w.write_csv(&path)?;
        written.push(path);
        generators.push(GeneratorEntry {
            name: ds.names[g].clone(),
            file,
            truth: ds.truth[g].clone(),
            noise_var: ds.noise_var[g],
            steady_state: w.steady_state,
        });
    }
    let meta = DatasetMeta {
        scenario: ds.scenario.clone(),
        fs: ds.fs,
        generators,
        labels: ds.labels.clone(),
    };
    let path = dir.join(LABELS_FILE);
    fs::write(&path, serde_json::to_string_pretty(&meta)?)?;
    written.push(path);
    Ok(written)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<RecordedDataset> {
    let dir = dir.as_ref();
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join(LABELS_FILE))?)?;
    let windows = meta
        .generators
        .iter()
        .map(|g| {
            let mut w = PmuWindow::read_csv(dir.join(&g.file), meta.fs).map_err(|e| Error::Generator {
                generator: g.name.clone(),
                source: Box::new(e.into()),
            })?;
            w.steady_state = g.steady_state;
            Ok(w)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RecordedDataset { meta, windows })
}
