//! `erasure sweep`: one full train+eval per (erasure parameter, noise)
//! cell, a results table with percentage drops against the clean baseline,
//! and line charts per metric.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde_json::json;

use crate::commands::train::{run_train, TrainCommon};
use crate::commands::usage_error;
use crate::manifest::RunManifest;
use crate::svg::{line_chart, Series};

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    /// Comma-separated channel parameters, e.g. `0.0,0.2,0.5,0.8`. In
    /// `random` mode these are erasure probabilities; in `threshold` mode,
    /// cutoffs.
    #[arg(long, default_value = "0.0,0.2,0.5,0.8")]
    pub p_list: String,
    /// Input-noise axis: `off`, `on`, or `both`.
    #[arg(long, default_value = "both")]
    pub awgn: String,
    /// Noise level used by the `on` cells when --awgn-std is left at 0.
    #[arg(long, default_value_t = 0.1)]
    pub awgn_on_std: f64,
    /// Run independent cells concurrently.
    #[arg(long)]
    pub parallel_cells: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// One line of the results table.
#[derive(Clone, Debug, serde::Serialize)]
pub struct SweepRow {
    pub p_erase: f64,
    pub awgn: bool,
    pub val_accuracy: f64,
    pub bleu: f64,
    pub pct_drop_acc: Option<f64>,
    pub pct_drop_bleu: Option<f64>,
    pub status: String,
}

struct CellResult {
    p: f64,
    awgn: bool,
    outcome: Result<crate::commands::train::TrainOutcome>,
    wall_s: f64,
}

fn cell_common(base: &TrainCommon, p: f64, awgn: bool, awgn_on_std: f64) -> TrainCommon {
    let mut c = base.clone();
    match c.channel_mode.as_str() {
        "threshold" => c.cutoff = p,
        _ => c.p_erase = p,
    }
    if awgn {
        if c.awgn_std == 0.0 {
            c.awgn_std = awgn_on_std;
        }
    } else {
        c.awgn_std = 0.0;
        c.awgn_mean = 0.0;
    }
    c
}

pub fn run(args: SweepArgs) -> Result<ExitCode> {
    let ps: Vec<f64> = {
        let mut ps = Vec::new();
        for tok in args.p_list.split(',') {
            match tok.trim().parse::<f64>() {
                Ok(p) if (0.0..=1.0).contains(&p) => ps.push(p),
                _ => return usage_error(&format!("bad --p-list entry {tok:?}")),
            }
        }
        ps
    };
    if ps.is_empty() {
        return usage_error("--p-list is empty");
    }
    let awgn_axis: Vec<bool> = match args.awgn.as_str() {
        "off" => vec![false],
        "on" => vec![true],
        "both" => vec![false, true],
        other => return usage_error(&format!("bad --awgn {other:?} (off | on | both)")),
    };

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let mut manifest = RunManifest::start(
        "sweep",
        args.common.seed,
        json!({
            "p_list": ps,
            "p_keep_list": ps.iter().map(|p| 1.0 - p).collect::<Vec<f64>>(),
            "awgn": args.awgn,
            "awgn_on_std": args.awgn_on_std,
            "channel_mode": args.common.channel_mode,
            "epochs": args.common.epochs,
            "batch_size": args.common.batch_size,
            "seed": args.common.seed,
            "parallel_cells": args.parallel_cells,
        }),
    );

    let cells: Vec<(f64, bool)> = awgn_axis
        .iter()
        .flat_map(|a| ps.iter().map(move |p| (*p, *a)))
        .collect();

    let run_cell = |(p, awgn): &(f64, bool)| -> CellResult {
        let start = Instant::now();
        let common = cell_common(&args.common, *p, *awgn, args.awgn_on_std);
        let cell_dir = args
            .out_dir
            .join(format!("p{p:.2}_awgn{}", u8::from(*awgn)));
        eprintln!("sweep cell: p = {p:.2}, awgn = {awgn}");
        let outcome = run_train(&common, &cell_dir, true);
        CellResult {
            p: *p,
            awgn: *awgn,
            outcome,
            wall_s: start.elapsed().as_secs_f64(),
        }
    };

    let results: Vec<CellResult> = if args.parallel_cells {
        cells.par_iter().map(run_cell).collect()
    } else {
        cells.iter().map(run_cell).collect()
    };

    // baseline: the clean (p = 0, no noise) cell
    let baseline = results
        .iter()
        .find(|r| r.p == 0.0 && !r.awgn)
        .and_then(|r| r.outcome.as_ref().ok())
        .map(|o| (o.final_val.accuracy, o.final_val.bleu));

    let mut rows = Vec::new();
    let mut any_failed = false;
    let mut timings = Vec::new();
    for r in &results {
        match &r.outcome {
            Ok(o) => {
                let (acc, bleu) = (o.final_val.accuracy, o.final_val.bleu);
                let drops = baseline.map(|(ba, bb)| {
                    (
                        100.0 * (ba - acc) / ba,
                        if bb != 0.0 { 100.0 * (bb - bleu) / bb } else { 0.0 },
                    )
                });
                rows.push(SweepRow {
                    p_erase: r.p,
                    awgn: r.awgn,
                    val_accuracy: acc,
                    bleu,
                    pct_drop_acc: drops.map(|d| d.0),
                    pct_drop_bleu: drops.map(|d| d.1),
                    status: "ok".into(),
                });
            }
            Err(e) => {
                any_failed = true;
                eprintln!("cell p = {:.2}, awgn = {} failed: {e:#}", r.p, r.awgn);
                rows.push(SweepRow {
                    p_erase: r.p,
                    awgn: r.awgn,
                    val_accuracy: f64::NAN,
                    bleu: f64::NAN,
                    pct_drop_acc: None,
                    pct_drop_bleu: None,
                    status: "failed".into(),
                });
            }
        }
        timings.push(json!({
            "p_erase": r.p,
            "awgn": r.awgn,
            "wall_time_s": r.wall_s,
        }));
    }

    let csv_path = args.out_dir.join("sweep.csv");
    {
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record([
            "p_erase",
            "awgn",
            "val_accuracy",
            "bleu",
            "pct_drop_acc",
            "pct_drop_bleu",
            "status",
        ])?;
        for row in &rows {
            w.write_record([
                format!("{:.3}", row.p_erase),
                u8::from(row.awgn).to_string(),
                format!("{:.6}", row.val_accuracy),
                format!("{:.4}", row.bleu),
                row.pct_drop_acc.map(|d| format!("{d:.2}")).unwrap_or_default(),
                row.pct_drop_bleu.map(|d| format!("{d:.2}")).unwrap_or_default(),
                row.status.clone(),
            ])?;
        }
        w.flush()?;
    }

    // one chart per metric, a series per noise setting
    let chart = |metric: &str, pick: fn(&SweepRow) -> f64| -> String {
        let mut series = Vec::new();
        for awgn in [false, true] {
            let points: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.awgn == awgn && r.status == "ok")
                .map(|r| (r.p_erase, pick(r)))
                .collect();
            if !points.is_empty() {
                series.push(Series {
                    name: if awgn { "awgn" } else { "noise-free" },
                    points,
                });
            }
        }
        line_chart(
            &format!("validation {metric} vs erasure probability"),
            "erasure probability",
            metric,
            &series,
        )
    };
    let acc_svg_path = args.out_dir.join("accuracy.svg");
    std::fs::write(&acc_svg_path, chart("accuracy", |r| r.val_accuracy))?;
    let bleu_svg_path = args.out_dir.join("bleu.svg");
    std::fs::write(&bleu_svg_path, chart("bleu", |r| r.bleu))?;

    manifest.set_notes(json!({ "cell_timings": timings }));
    manifest.add_output(&csv_path);
    manifest.add_output(&acc_svg_path);
    manifest.add_output(&bleu_svg_path);
    manifest.finish(&args.out_dir)?;

    Ok(if any_failed {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}
