//! Effective run configuration: defaults, then a TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use mrf_core::data::{
    chrono_split, chrono_split_at, load_csv, synth_multiperiodic, CsvLayout, Split, SplitSpec,
    SynthSpec, TimeSeries,
};
use mrf_core::model::ModelConfig;
use mrf_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

/// Where the series comes from and how it is split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `synth` or a path to a comma-separated file.
    pub source: Option<String>,
    /// Overrides header detection for file sources.
    pub has_header: Option<bool>,
    /// Overrides timestamp-column detection for file sources.
    pub timestamp_col: Option<usize>,
    pub synth: SynthSpec,
    pub split: SplitSpec,
    /// Explicit `[val_start, test_start]` row indices, replacing `split`.
    pub boundaries: Option<[usize; 2]>,
}

impl DataConfig {
    pub fn source(&self) -> Result<&str, Failure> {
        self.source
            .as_deref()
            .ok_or_else(|| Failure::usage("missing --data (a CSV path or `synth`)"))
    }

    pub fn load(&self) -> Result<TimeSeries, Failure> {
        let source = self.source()?;
        if source == "synth" {
            return Ok(synth_multiperiodic(&self.synth)?);
        }
        load_series(Path::new(source), self.has_header, self.timestamp_col)
    }

    pub fn split(&self, series: &TimeSeries) -> Result<Split, Failure> {
        Ok(match self.boundaries {
            Some([a, b]) => chrono_split_at(series, a, b)?,
            None => chrono_split(series, &self.split)?,
        })
    }
}

/// Loads a CSV, detecting the header and timestamp column unless given.
pub fn load_series(
    path: &Path,
    has_header: Option<bool>,
    timestamp_col: Option<usize>,
) -> Result<TimeSeries, Failure> {
    if !path.is_file() {
        return Err(Failure::usage(format!(
            "--data: file `{}` not found",
            path.display()
        )));
    }
    let detected = CsvLayout::detect(path)?;
    let has_header = has_header.unwrap_or(detected.has_header);
    let timestamp_col = timestamp_col.or(detected.timestamp_col);
    Ok(load_csv(path, has_header, timestamp_col)?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| {
            Failure::usage(format!("--config: cannot read `{}`: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| Failure::usage(format!("--config: `{}`: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string(self).map_err(|e| Failure::usage(format!("cannot serialise config: {e}")))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seed > i64::MAX as u64 {
            return Err(Failure::usage("--seed must fit in a signed 64-bit integer"));
        }
        Ok(())
    }
}

/// Flags shared by commands that build a model.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct ModelFlags {
    /// Look-back window length I.
    #[arg(long)]
    pub lookback: Option<usize>,
    /// Forecast horizon O.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Model width d.
    #[arg(long)]
    pub width: Option<usize>,
    /// Number of multi-resolution blocks N.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Periodicities detected per block k.
    #[arg(long)]
    pub resolutions: Option<usize>,
    /// Attention heads h.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Disable the resolution embedding.
    #[arg(long)]
    pub no_res_emb: bool,
    /// Add each block's input to its output.
    #[arg(long)]
    pub block_residual: bool,
}

#[derive(Clone, Debug, Default, clap::Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    pub patience: Option<usize>,
}

impl RunConfig {
    pub fn apply_model_flags(&mut self, f: &ModelFlags) {
        let m = &mut self.model;
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut m.lookback, f.lookback);
        set(&mut m.horizon, f.horizon);
        set(&mut m.width, f.width);
        set(&mut m.blocks, f.blocks);
        set(&mut m.resolutions, f.resolutions);
        set(&mut m.heads, f.heads);
        if f.no_res_emb {
            m.use_res_emb = false;
        }
        if f.block_residual {
            m.block_residual = true;
        }
    }

    pub fn apply_train_flags(&mut self, f: &TrainFlags) {
        let t = &mut self.train;
        if let Some(v) = f.seed {
            t.seed = v;
        }
        if let Some(v) = f.epochs {
            t.epochs = v;
        }
        if let Some(v) = f.batch {
            t.batch_size = v;
        }
        if let Some(v) = f.lr {
            t.learning_rate = v;
        }
        if let Some(v) = f.patience {
            t.patience = v;
        }
    }
}

/// `--out`, else `$MRF_OUT_DIR/<name>`, else `runs/<name>`.
pub fn output_dir(out: Option<PathBuf>, root: Option<PathBuf>, name: &str) -> PathBuf {
    out.unwrap_or_else(|| root.unwrap_or_else(|| PathBuf::from("runs")).join(name))
}
