//! `erasure verify`: sample a geometry, run mask trials, report margin,
//! bound, and empirical flip statistics.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Args;
use serde_json::json;

use erasure_core::margin::{
    enumerate_masks, margin_report, random_setup, setup_with_aligned_top, verify_top1,
    QDistribution, TheoremParams, DEFAULT_C,
};
use erasure_core::num::rng::RngStream;

use crate::commands::usage_error;
use crate::manifest::RunManifest;

#[derive(Args)]
pub struct VerifyArgs {
    /// Embedding dimension.
    #[arg(long, default_value_t = 256)]
    pub d: usize,
    /// Number of output embeddings.
    #[arg(long, default_value_t = 16)]
    pub m: usize,
    /// Keep probability of the Bernoulli mask.
    #[arg(long, default_value_t = 0.9)]
    pub p_keep: f64,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    /// Bound constant; defaults to the shipped calibrated value.
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    pub trials: u64,
    /// Query distribution: uniform | onehot | powerlaw:ALPHA.
    #[arg(long, default_value = "uniform")]
    pub q_dist: String,
    /// Plant the query as the top embedding (wide margin).
    #[arg(long)]
    pub aligned_top: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also compute the exact flip probability by enumerating all masks
    /// (requires d <= 20).
    #[arg(long)]
    pub exact: bool,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: VerifyArgs) -> Result<ExitCode> {
    if args.d == 0 || args.m < 2 {
        return usage_error("need --d >= 1 and --m >= 2");
    }
    if !(0.0 < args.p_keep && args.p_keep <= 1.0) {
        return usage_error("--p-keep must lie in (0, 1]");
    }
    if !(0.0 < args.delta && args.delta < 1.0) {
        return usage_error("--delta must lie in (0, 1)");
    }
    if args.exact && args.d > 20 {
        return usage_error("--exact enumerates 2^d masks and needs --d <= 20");
    }
    let q_dist = match QDistribution::parse(&args.q_dist) {
        Ok(d) => d,
        Err(e) => return usage_error(&e.to_string()),
    };
    let c = args.c.unwrap_or(DEFAULT_C);

    let setup_rng = RngStream::new(args.seed, 1);
    let trial_rng = RngStream::new(args.seed, 2);
    let setup = if args.aligned_top {
        setup_with_aligned_top(args.d, args.m, q_dist, &mut setup_rng.clone())
    } else {
        random_setup(args.d, args.m, q_dist, &mut setup_rng.clone())
    }
    .context("building geometry setup")?;

    let params = TheoremParams::new(args.p_keep, args.delta, c)?;
    let report = margin_report(&setup, &params)?;
    let mc = verify_top1(&setup, args.p_keep, args.trials, &trial_rng)?;

    let mut doc = json!({
        "margin_report": serde_json::from_str::<serde_json::Value>(
            &report.to_json(args.seed, trial_rng.stream_id()))?,
        "mc_result": serde_json::from_str::<serde_json::Value>(
            &mc.to_json(args.seed, trial_rng.stream_id()))?,
        "q_dist": q_dist.to_string(),
        "aligned_top": args.aligned_top,
        "d": args.d,
        "m": args.m,
    });
    if args.exact {
        let exact = enumerate_masks(&setup, args.p_keep)?;
        doc.as_object_mut()
            .expect("object")
            .insert("exact".into(), serde_json::to_value(&exact)?);
    }
    let text = serde_json::to_string_pretty(&doc)?;
    println!("{text}");

    // success when nothing is promised, or the promise held empirically
    let se = (args.delta * (1.0 - args.delta)
        / (mc.trials - mc.zero_mask_count).max(1) as f64)
        .sqrt();
    let ok = !report.guaranteed || mc.flip_rate <= args.delta + 3.0 * se;

    if let Some(out) = &args.out {
        std::fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
        if let Some(dir) = out.parent() {
            let mut manifest = RunManifest::start(
                "verify",
                args.seed,
                json!({
                    "d": args.d, "m": args.m, "p_keep": args.p_keep, "delta": args.delta,
                    "c": c, "trials": args.trials, "q_dist": q_dist.to_string(),
                    "aligned_top": args.aligned_top, "exact": args.exact,
                }),
            );
            manifest.add_output(out);
            manifest.finish(dir)?;
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
