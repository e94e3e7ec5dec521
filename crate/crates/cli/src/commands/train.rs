use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use mrf_core::metrics::MetricReport;
use mrf_core::model::MultiResFormer;
use mrf_core::tensor::save_checkpoint;
use mrf_core::training::{
    make_windows, predict_windows, train_with, write_history_csv, write_timings_csv,
};

use super::{emit_line, fnv1a, write_text};
use crate::config::{output_dir, ModelFlags, RunConfig, TrainFlags};
use crate::failure::Failure;
use crate::manifest::*;

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Input series: a CSV path, or `synth` for the built-in generator.
    #[arg(long)]
    pub data: Option<String>,
    /// TOML file with [data], [model] and [train] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Repeat the run recorded in this manifest (file or run directory).
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
    /// Run directory. Defaults to `$MRF_OUT_DIR/train-<hash>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "MRF_OUT_DIR", hide_env_values = true)]
    pub out_root: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

pub fn run(args: TrainArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let (mut cfg, expected_fingerprint) = match &args.manifest {
        Some(path) => {
            let m = RunManifest::load(path)?;
            (m.config, Some(m.dataset.sha256))
        }
        None => match &args.config {
            Some(path) => (RunConfig::from_toml_file(path)?, None),
            None => (RunConfig::default(), None),
        },
    };
    if let Some(data) = &args.data {
        cfg.data.source = Some(data.clone());
    }
    cfg.apply_model_flags(&args.model);
    cfg.apply_train_flags(&args.train);
    cfg.validate()?;

    let series = cfg.data.load()?;
    let fingerprint = series.fingerprint();
    if let Some(expected) = expected_fingerprint {
        if expected != fingerprint {
            return Err(Failure::usage(format!(
                "dataset `{}` no longer matches the manifest (sha256 {fingerprint}, recorded {expected})",
                cfg.data.source()?
            )));
        }
    }
    let split = cfg.data.split(&series)?;
    let (i, o) = (cfg.model.lookback, cfg.model.horizon);
    let train_set = make_windows(&split.train, i, o, cfg.train.window_stride)?;
    let val_set = make_windows(&split.val, i, o, 1)?;
    let test_set = make_windows(&split.test, i, o, 1)?;

    let config_text = cfg.to_toml()?;
    let out = output_dir(
        args.out.clone(),
        args.out_root.clone(),
        &format!(
            "train-{:016x}",
            fnv1a(format!("{config_text}{fingerprint}").as_bytes())
        ),
    );
    fs::create_dir_all(&out).map_err(|e| Failure::io(out.display(), e))?;

    let mut model = MultiResFormer::new(cfg.model.clone(), cfg.train.seed)?;
    if !args.quiet {
        eprintln!(
            "training {} parameters on {} windows ({} val, {} test) -> {}",
            model.count_parameters(),
            train_set.len(),
            val_set.len(),
            test_set.len(),
            out.display()
        );
    }
    let quiet = args.quiet;
    let report = train_with(&mut model, &train_set, &val_set, &cfg.train, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  train_mse {:.6}  val_mse {:.6}  {:.1}s",
                r.epoch, r.train_mse, r.val_mse, r.seconds
            );
        }
    })?;
    let (pred, target) = predict_windows(&model, &test_set, cfg.train.batch_size)?;
    let test = MetricReport::long_term(&pred, &target)?;

    save_checkpoint(&model.params.store, &out.join(CHECKPOINT_FILE))?;
    write_text(&out.join(CONFIG_FILE), &config_text)?;
    write_history_csv(&out.join(HISTORY_FILE), &report.history)?;
    write_timings_csv(&out.join(TIMINGS_FILE), &report.history)?;
    let scaler = serde_json::to_string_pretty(&split.scaler)
        .map_err(|e| Failure::usage(format!("cannot serialise scaler: {e}")))?;
    write_text(&out.join(SCALER_FILE), &scaler)?;

    let manifest = RunManifest {
        version: version_string(),
        seed: cfg.train.seed,
        dataset: DatasetInfo {
            source: cfg.data.source()?.to_string(),
            sha256: fingerprint,
            rows: series.len(),
            variates: series.num_variates(),
        },
        timings: Timings {
            total_seconds: started.elapsed().as_secs_f64(),
            epoch_seconds: report.history.iter().map(|r| r.seconds).collect(),
        },
        results: RunResults {
            parameters: model.count_parameters(),
            epochs_run: report.history.len(),
            best_epoch: report.best_epoch,
            best_val_mse: report.best_val_mse,
            test_mse: test.mse,
            test_mae: test.mae,
        },
        config: cfg,
    };
    manifest.save(&out)?;
    let summary = serde_json::json!({ "run_dir": out, "results": manifest.results });
    emit_line(&serde_json::to_string_pretty(&summary).expect("plain data serialises"))
}
