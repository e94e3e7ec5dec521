use std::path::PathBuf;

use mrf_core::model::{ModelConfig, MultiResFormer};
use mrf_core::tensor::Tensor;
use mrf_core::training::{gradient_check, GradCheckOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{emit_line, write_text};
use crate::config::{ModelFlags, RunConfig};
use crate::failure::{Failure, EXIT_VERIFY};

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    /// Seeds the weights, the input and any coordinate subsample.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Coordinates checked before subsampling kicks in.
    #[arg(long, default_value_t = 10_000)]
    pub max_coords: usize,
    #[arg(long, default_value_t = 2)]
    pub variates: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub inject_wrong_adjoint: bool,
}

/// I=16, O=4, d=8, N=1, k=2, h=2, d_ff=16.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        lookback: 16,
        horizon: 4,
        width: 8,
        blocks: 1,
        resolutions: 2,
        heads: 2,
        ffn_width: 16,
        ..ModelConfig::default()
    }
}

pub fn run(args: GradcheckArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig {
        model: tiny_config(),
        ..RunConfig::default()
    };
    cfg.apply_model_flags(&args.model);
    cfg.model.validate()?;
    if args.variates == 0 || args.batch == 0 {
        return Err(Failure::usage("--variates and --batch must be positive"));
    }
    let m = &cfg.model;
    let model = MultiResFormer::new(m.clone(), args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0x5eed);
    let (b, i, o, v) = (args.batch, m.lookback, m.horizon, args.variates);
    let x: Vec<f64> = (0..b * i * v)
        .map(|n| (n as f64 * 0.7).sin() + rng.random_range(-0.3..0.3))
        .collect();
    let y: Vec<f64> = (0..b * o * v)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let opts = GradCheckOptions {
        step: args.step,
        tolerance: args.tolerance,
        max_coords: args.max_coords,
        seed: args.seed,
        only: None,
        inject_fault: args.inject_wrong_adjoint,
    };
    let report = gradient_check(
        &model,
        &Tensor::new([b, i, v], x)?,
        &Tensor::new([b, o, v], y)?,
        &opts,
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Failure::usage(format!("cannot serialise report: {e}")))?;
    match &args.out {
        Some(path) => write_text(path, &json)?,
        None => emit_line(&json)?,
    }
    eprintln!(
        "checked {} of {} coordinates: max rel. error {:.3e} at {}[{}], mean {:.3e}",
        report.coords_checked,
        report.coords_total,
        report.max_rel_error,
        report.worst_param,
        report.worst_index,
        report.mean_rel_error
    );
    if report.passed {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_VERIFY,
            format!(
                "gradient check failed: {} coordinates above {:e}, worst {}[{}]",
                report.offenders.len(),
                report.tolerance,
                report.worst_param,
                report.worst_index
            ),
        ))
    }
}
