//! `erasure` — reproducibility surface for the erasure-channel experiments:
//! bound verification, constant calibration, training, sweeps, and exports.
//!
//! Exit codes: 0 success, 1 completed with failures, 2 usage error.

mod commands;
mod manifest;
mod svg;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "erasure", version, about = "Coordinate-erasure robustness toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Verify top-1 preservation on a sampled geometry via Monte Carlo masks.
    Verify(commands::verify::VerifyArgs),
    /// Fit the deviation-bound constant on a grid of setups.
    Calibrate(commands::calibrate::CalibrateArgs),
    /// Train the channel-augmented translation model on a pair corpus.
    Train(commands::train::TrainArgs),
    /// Train and evaluate across erasure probabilities; emit a results table
    /// and charts.
    Sweep(commands::sweep::SweepArgs),
    /// Export per-head cross-attention heatmaps for one sentence.
    ExportAttention(commands::export::ExportArgs),
    /// Write a deterministic synthetic pair corpus.
    GenCorpus(commands::gen_corpus::GenCorpusArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify(args) => commands::verify::run(args),
        Command::Calibrate(args) => commands::calibrate::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Sweep(args) => commands::sweep::run(args),
        Command::ExportAttention(args) => commands::export::run(args),
        Command::GenCorpus(args) => commands::gen_corpus::run(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
