use std::collections::BTreeMap;
use std::path::PathBuf;

use mrf_core::model::{block_periodicities, revin_normalize};
use mrf_core::spectral::{amplitude_spectrum, PeriodicitySet};
use mrf_core::tensor::{Graph, Tensor};
use serde::Serialize;

use super::{emit_line, write_text};
use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Debug, clap::Args)]
pub struct DetectArgs {
    /// Input series: a CSV path, or `synth`.
    #[arg(long)]
    pub data: Option<String>,
    /// TOML file; its [data] table supplies generator and layout settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Window length I.
    #[arg(long, default_value_t = 336)]
    pub lookback: usize,
    /// Periods detected per window k.
    #[arg(long, default_value_t = 3)]
    pub resolutions: usize,
    /// Step between window origins.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Seed for the `synth` generator.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the histogram as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Aggregate over windows for one period.
#[derive(Debug, Serialize)]
pub struct PeriodStat {
    pub period: usize,
    /// Windows in which the period was detected.
    pub count: usize,
    /// `count / windows`.
    pub fraction: f64,
    /// Share of windows where it ranked first.
    pub top1_fraction: f64,
    /// Mean aggregation weight per window; sums to 1 over periods.
    pub mass: f64,
}

#[derive(Debug, Serialize)]
pub struct LastWindow {
    /// Amplitudes for frequencies 1..=I/2.
    pub amplitudes: Vec<f64>,
    pub periodicities: PeriodicitySet,
}

#[derive(Debug, Serialize)]
pub struct DetectReport {
    pub source: String,
    pub lookback: usize,
    pub resolutions: usize,
    pub stride: usize,
    pub windows: usize,
    pub ground_truth_periods: Vec<usize>,
    /// Sorted by descending mass, then ascending period.
    pub histogram: Vec<PeriodStat>,
    pub last_window: LastWindow,
}

#[derive(Default)]
struct Tally {
    count: usize,
    top1: usize,
    mass: f64,
}

pub fn run(args: DetectArgs) -> Result<(), Failure> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_toml_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &args.data {
        cfg.data.source = Some(d.clone());
    }
    if let Some(seed) = args.seed {
        cfg.data.synth.seed = seed;
    }
    let (i, k) = (args.lookback, args.resolutions);
    if args.stride == 0 || i < 2 || k == 0 || k > i / 2 {
        return Err(Failure::usage(format!(
            "need --stride ≥ 1, --lookback ≥ 2 and 1 ≤ --resolutions ≤ lookback/2 (got {}, {i}, {k})",
            args.stride
        )));
    }
    let series = cfg.data.load()?;
    let (t, v) = (series.len(), series.num_variates());
    if t < i {
        return Err(Failure::usage(format!(
            "series has {t} rows, fewer than --lookback {i}"
        )));
    }

    let mut tallies: BTreeMap<usize, Tally> = BTreeMap::new();
    let mut windows = 0;
    let mut last = None;
    for origin in (0..=t - i).step_by(args.stride) {
        let x = Tensor::new([1, i, v], series.rows(origin, origin + i).to_vec())?;
        let mut g = Graph::eval();
        let xv = g.constant(x);
        let (normed, _) = revin_normalize(&mut g, xv, 1e-5)?;
        let normed = g.value(normed);
        let set = block_periodicities(normed, k)?;
        for (rank, (&p, &w)) in set.periods.iter().zip(&set.weights).enumerate() {
            let tally = tallies.entry(p).or_default();
            tally.count += 1;
            tally.mass += w;
            tally.top1 += usize::from(rank == 0);
        }
        windows += 1;
        if origin + args.stride > t - i {
            last = Some(LastWindow {
                amplitudes: amplitude_spectrum(normed)?.amplitudes().to_vec(),
                periodicities: set,
            });
        }
    }
    let n = windows as f64;
    let mut histogram: Vec<PeriodStat> = tallies
        .into_iter()
        .map(|(period, t)| PeriodStat {
            period,
            count: t.count,
            fraction: t.count as f64 / n,
            top1_fraction: t.top1 as f64 / n,
            mass: t.mass / n,
        })
        .collect();
    histogram.sort_by(|a, b| b.mass.total_cmp(&a.mass).then(a.period.cmp(&b.period)));

    if let Some(path) = &args.csv {
        let mut text = String::from("period,count,fraction,top1_fraction,mass\n");
        for s in &histogram {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                s.period, s.count, s.fraction, s.top1_fraction, s.mass
            ));
        }
        write_text(path, &text)?;
    }
    let report = DetectReport {
        source: cfg.data.source()?.to_string(),
        lookback: i,
        resolutions: k,
        stride: args.stride,
        windows,
        ground_truth_periods: series.ground_truth_periods().to_vec(),
        histogram,
        last_window: last.expect("at least one window"),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Failure::usage(format!("cannot serialise report: {e}")))?;
    match &args.out {
        Some(path) => write_text(path, &json),
        None => emit_line(&json),
    }
}
