//! `erasure calibrate`: fit the bound constant on a setup grid and write the
//! constants file with full provenance.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Args;
use serde_json::json;

use erasure_core::margin::{calibrate_c, default_grid, holdout_grid, GridCell};
use erasure_core::num::rng::RngStream;

use crate::commands::usage_error;
use crate::manifest::RunManifest;

#[derive(Args)]
pub struct CalibrateArgs {
    /// Grid to fit on: `default`, `holdout`, or a JSON file with a list of
    /// cells `{d, m, p_keep, q_dist, aligned_top}`.
    #[arg(long, default_value = "default")]
    pub grid: String,
    #[arg(long, default_value_t = 2000)]
    pub trials: u64,
    /// Deviation quantile each cell is fitted at (defaults to 1 - delta).
    #[arg(long)]
    pub quantile: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long, default_value_t = 20260808)]
    pub seed: u64,
    /// Constants file to write.
    #[arg(long)]
    pub out: PathBuf,
}

fn load_grid(spec: &str) -> Result<Vec<GridCell>> {
    match spec {
        "default" => Ok(default_grid()),
        "holdout" => Ok(holdout_grid()
            .into_iter()
            .filter(|c| !c.aligned_top)
            .collect()),
        path => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading grid file {path}"))?;
            Ok(serde_json::from_str(&text).context("parsing grid file")?)
        }
    }
}

pub fn run(args: CalibrateArgs) -> Result<ExitCode> {
    if !(0.0 < args.delta && args.delta < 1.0) {
        return usage_error("--delta must lie in (0, 1)");
    }
    let quantile = args.quantile.unwrap_or(1.0 - args.delta);
    if !(0.0 < quantile && quantile < 1.0) {
        return usage_error("--quantile must lie in (0, 1)");
    }
    let grid = load_grid(&args.grid)?;
    let rng = RngStream::new(args.seed, 0);
    let outcome = calibrate_c(&grid, args.trials, quantile, args.delta, &rng)?;
    std::fs::write(&args.out, outcome.to_json())
        .with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "calibrated C = {:.6} over {} cells (worst cell index {})",
        outcome.c,
        outcome.cells.len(),
        outcome.worst_cell
    );

    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        let mut manifest = RunManifest::start(
            "calibrate",
            args.seed,
            json!({
                "grid": args.grid,
                "trials": args.trials,
                "quantile": quantile,
                "delta": args.delta,
                "cells": grid.len(),
            }),
        );
        manifest.add_output(&args.out);
        manifest.finish(dir)?;
    }
    Ok(ExitCode::SUCCESS)
}
