//! `mrf`: train, evaluate and inspect multi-resolution forecasters.

mod commands;
mod config;
mod failure;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{detect, eval, forecast, gradcheck, train};

#[derive(Debug, Parser)]
#[command(
    name = "mrf",
    version,
    about = "Multi-resolution transformer forecaster"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoint, history and manifest to a run directory.
    Train(train::TrainArgs),
    /// Score a trained run on one split and print the metrics as JSON.
    Eval(eval::EvalArgs),
    /// Forecast the horizon after the last look-back rows of a CSV.
    Forecast(forecast::ForecastArgs),
    /// Histogram of the periods detected over sliding windows.
    DetectPeriods(detect::DetectArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(gradcheck::GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Forecast(a) => forecast::run(a),
        Command::DetectPeriods(a) => detect::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
