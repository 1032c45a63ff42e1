//! `erasure gen-corpus`: write the deterministic synthetic pair corpus.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Args;
use serde_json::json;

use erasure_core::corpus::synth::{generate_tsv, single_pair_tsv};

use crate::manifest::RunManifest;

#[derive(Args)]
pub struct GenCorpusArgs {
    #[arg(long, default_value_t = 10_000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Emit the one-pair overfitting fixture instead of sampled pairs.
    #[arg(long)]
    pub single_pair: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: GenCorpusArgs) -> Result<ExitCode> {
    let text = if args.single_pair {
        single_pair_tsv()
    } else {
        generate_tsv(args.pairs, args.seed)
    };
    std::fs::write(&args.out, &text)
        .with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        let mut manifest = RunManifest::start(
            "gen-corpus",
            args.seed,
            json!({
                "pairs": args.pairs,
                "single_pair": args.single_pair,
                "out": args.out.display().to_string(),
            }),
        );
        manifest.add_output(&args.out);
        manifest.finish(dir)?;
    }
    Ok(ExitCode::SUCCESS)
}
