use std::path::PathBuf;

use mrf_core::metrics::{
    mase, owa, seasonal_naive_forecast, smape, write_per_horizon_csv, MetricReport,
};
use mrf_core::tensor::Tensor;
use mrf_core::training::{make_windows, predict_windows, stack_batch};

use super::{emit_line, load_model, load_scaler};
use crate::failure::Failure;
use crate::manifest::RunManifest;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint to evaluate instead of the run's own.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    /// Also write per-step MSE to `<run>/per_horizon_<split>.csv`.
    #[arg(long)]
    pub per_horizon: bool,
    /// Season length for SMAPE, MASE and OWA (against seasonal-naive), on the
    /// original scale.
    #[arg(long)]
    pub season: Option<usize>,
}

pub fn run(args: EvalArgs) -> Result<(), Failure> {
    let manifest = RunManifest::load(&args.run)?;
    let cfg = &manifest.config;
    let model = load_model(&args.run, &manifest, args.checkpoint.as_deref())?;
    let series = cfg.data.load()?;
    if series.fingerprint() != manifest.dataset.sha256 {
        return Err(Failure::usage(format!(
            "dataset `{}` no longer matches the run's manifest",
            manifest.dataset.source
        )));
    }
    let split = cfg.data.split(&series)?;
    let segment = match args.split {
        SplitName::Train => &split.train,
        SplitName::Val => &split.val,
        SplitName::Test => &split.test,
    };
    let windows = make_windows(segment, cfg.model.lookback, cfg.model.horizon, 1)?;
    let (pred, target) = predict_windows(&model, &windows, cfg.train.batch_size)?;
    let mut report = MetricReport::long_term(&pred, &target)?;
    if args.per_horizon {
        report = report.with_per_horizon(&pred, &target)?;
        let name = format!(
            "per_horizon_{}.csv",
            format!("{:?}", args.split).to_lowercase()
        );
        let path = args.run.join(name);
        write_per_horizon_csv(&path, report.per_horizon.as_deref().unwrap_or_default())?;
        eprintln!("per-horizon MSE written to {}", path.display());
    }
    if let Some(m) = args.season {
        let scaler = load_scaler(&args.run)?;
        let all: Vec<usize> = (0..windows.len()).collect();
        let (mut x, _) = stack_batch(&windows, &all)?;
        let (mut pred, mut target) = (pred, target);
        for t in [&mut x, &mut pred, &mut target] {
            scaler.invert_in_place(t.data_mut());
        }
        let reference = seasonal_naive_forecast(&x, cfg.model.horizon, m)?;
        let model_mase = mean_mase(&pred, &target, &x, m)?;
        let ref_mase = mean_mase(&reference, &target, &x, m)?;
        let model_smape = smape(&pred, &target)?;
        let ref_smape = smape(&reference, &target)?;
        report.smape = Some(model_smape);
        report.mase = Some(model_mase);
        report.owa = Some(owa(model_smape, model_mase, ref_smape, ref_mase)?);
    }
    emit_line(&report.to_json()?)
}

/// MASE averaged over (window, variate) series, each scaled by its own
/// look-back window.
fn mean_mase(pred: &Tensor, target: &Tensor, x: &Tensor, m: usize) -> Result<f64, Failure> {
    let &[batch, horizon, variates] = pred.shape() else {
        return Err(Failure::usage("forecasts must be [B, O, V]"));
    };
    let len = x.shape()[1];
    let mut total = 0.0;
    for b in 0..batch {
        for v in 0..variates {
            let col = |t: &Tensor, steps: usize| -> Vec<f64> {
                (0..steps).map(|s| t.at(&[b, s, v])).collect()
            };
            let p = Tensor::from_vec(col(pred, horizon));
            let y = Tensor::from_vec(col(target, horizon));
            let insample = col(x, len);
            total += mase(&p, &y, &insample, m)?;
        }
    }
    Ok(total / (batch * variates) as f64)
}
