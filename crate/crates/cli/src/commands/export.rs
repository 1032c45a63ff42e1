//! `erasure export-attention`: load a checkpoint, translate one sentence,
//! write per-(layer, head) cross-attention heatmap CSVs.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Args;
use serde_json::json;

use erasure_core::corpus::{normalize, Vocab, END_ID, UNK_ID};
use erasure_core::model::{eval_sentence_stream, export_attention, greedy_translate, load_checkpoint};

use crate::manifest::RunManifest;

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source sentence (raw text; normalized like the corpus).
    #[arg(long)]
    pub sentence: String,
    /// Directory holding src_vocab.txt / tgt_vocab.txt; defaults to the
    /// checkpoint's directory.
    #[arg(long)]
    pub vocab_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn run(args: ExportArgs) -> Result<ExitCode> {
    let vocab_dir = args
        .vocab_dir
        .clone()
        .or_else(|| args.checkpoint.parent().map(|p| p.to_path_buf()))
        .context("cannot determine vocab directory")?;
    let src_vocab = Vocab::from_export_lines(
        &std::fs::read_to_string(vocab_dir.join("src_vocab.txt"))
            .context("reading src_vocab.txt")?,
    )?;
    let tgt_vocab = Vocab::from_export_lines(
        &std::fs::read_to_string(vocab_dir.join("tgt_vocab.txt"))
            .context("reading tgt_vocab.txt")?,
    )?;

    let trainer = load_checkpoint(&args.checkpoint)?.trainer;
    let tokens = normalize(&args.sentence);
    if tokens.is_empty() {
        anyhow::bail!("sentence normalized to nothing");
    }
    let mut ids: Vec<u32> = Vec::with_capacity(tokens.len() + 1);
    for tok in &tokens {
        let id = src_vocab.encode(tok);
        if id == UNK_ID {
            eprintln!("warning: token {tok:?} not in vocabulary, using <unk>");
        }
        ids.push(id);
    }
    let keep = ids.len().min(trainer.model.cfg.max_len - 1);
    ids.truncate(keep);
    ids.push(END_ID);

    let sentence_rng = eval_sentence_stream(trainer.cfg.seed, 0);
    let translation = greedy_translate(&trainer.model, &trainer.spec, &ids, &sentence_rng, true)?;
    let hyp_tokens = translation.tokens(&tgt_vocab);
    println!("{}", hyp_tokens.join(" "));

    let src_tokens: Vec<String> = ids.iter().map(|id| src_vocab.decode(*id).to_string()).collect();
    let exports = export_attention(&translation, &src_tokens, &tgt_vocab)?;

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let mut manifest = RunManifest::start(
        "export-attention",
        trainer.cfg.seed,
        json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "sentence": args.sentence,
            "normalized": tokens,
            "hypothesis": hyp_tokens,
        }),
    );
    for e in &exports {
        let path = args.out_dir.join(format!("attn_l{}_h{}.csv", e.layer, e.head));
        std::fs::write(&path, &e.csv)?;
        manifest.add_output(&path);
    }
    manifest.finish(&args.out_dir)?;
    Ok(ExitCode::SUCCESS)
}
