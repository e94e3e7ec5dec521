//! Run manifest: everything needed to repeat a training run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::failure::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const HISTORY_FILE: &str = "history.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const SCALER_FILE: &str = "scaler.json";

pub fn version_string() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub source: String,
    /// SHA-256 of the loaded series before splitting.
    pub sha256: String,
    pub rows: usize,
    pub variates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub epoch_seconds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub parameters: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub test_mse: f64,
    pub test_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub dataset: DatasetInfo,
    pub timings: Timings,
    pub results: RunResults,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Failure::usage(format!("cannot serialise manifest: {e}")))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| Failure::io(path.display(), e))
    }

    /// Reads a manifest file, or `manifest.json` inside a run directory.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| {
            Failure::usage(format!("cannot read manifest `{}`: {e}", file.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::corrupt(format!("manifest `{}` is corrupt: {e}", file.display())))
    }
}
