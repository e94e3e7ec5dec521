use std::path::PathBuf;

use mrf_core::tensor::Tensor;

use super::{emit, load_model, load_scaler};
use crate::config::load_series;
use crate::failure::Failure;
use crate::manifest::RunManifest;

#[derive(Debug, clap::Args)]
pub struct ForecastArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// CSV whose last look-back rows are forecast from.
    #[arg(long)]
    pub input: PathBuf,
    /// Destination CSV; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

pub fn run(args: ForecastArgs) -> Result<(), Failure> {
    let manifest = RunManifest::load(&args.run)?;
    let cfg = &manifest.config.model;
    let model = load_model(&args.run, &manifest, None)?;
    let scaler = load_scaler(&args.run)?;
    let series = load_series(&args.input, None, None)
        .map_err(|f| Failure::new(f.code, format!("--input: {}", f.message)))?;
    let v = series.num_variates();
    if v != scaler.mean.len() {
        return Err(Failure::usage(format!(
            "--input has {v} variates, the model was trained on {}",
            scaler.mean.len()
        )));
    }
    let (i, t) = (cfg.lookback, series.len());
    if t < i {
        return Err(Failure::usage(format!(
            "--input has {t} rows, fewer than the look-back of {i}"
        )));
    }
    let window = scaler.apply(&series.slice(t - i, t)?);
    let x = Tensor::new([1, i, v], window.values().to_vec())?;
    let mut y = model.predict(&x)?.into_data();
    scaler.invert_in_place(&mut y);

    let mut out = csv::Writer::from_writer(Vec::new());
    let write = |w: &mut csv::Writer<Vec<u8>>, rec: Vec<String>| {
        w.write_record(rec)
            .map_err(|e| Failure::usage(format!("cannot format CSV: {e}")))
    };
    write(&mut out, series.variate_names().to_vec())?;
    for row in y.chunks(v) {
        write(&mut out, row.iter().map(f64::to_string).collect())?;
    }
    let bytes = out
        .into_inner()
        .map_err(|e| Failure::usage(format!("cannot format CSV: {e}")))?;
    match &args.output {
        Some(path) => std::fs::write(path, bytes).map_err(|e| Failure::io(path.display(), e)),
        None => emit(&bytes),
    }
}
