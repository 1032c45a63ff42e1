//! `erasure train`: corpus in, per-epoch metrics CSV + checkpoint + vocab
//! exports + manifest out.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde_json::json;

use erasure_core::channel::{AwgnConfig, ChannelConfig};
use erasure_core::corpus::{
    build_vocab, load_pairs, split_train_val, Direction, PairFilters, SentencePair, Vocab,
};
use erasure_core::model::{
    evaluate_split, save_checkpoint, ModelConfig, ModelSpec, TrainConfig, Trainer, ValMetrics,
};

use crate::manifest::RunManifest;

/// Flags shared between `train` and each `sweep` cell.
#[derive(Args, Clone)]
pub struct TrainCommon {
    /// Tab-separated pair corpus (`ENGLISH<TAB>FRENCH` per line).
    #[arg(long)]
    pub data: PathBuf,
    /// Translation direction: fr-en (default, matching the sample outputs)
    /// or en-fr.
    #[arg(long, default_value = "fr-en")]
    pub direction: String,
    /// Erasure mechanism at the encoder-decoder interface:
    /// `threshold` (coordinate kept iff |x| >= cutoff) or `random`
    /// (coordinate kept with probability 1 - p_erase).
    #[arg(long, default_value = "threshold")]
    pub channel_mode: String,
    /// Magnitude cutoff for `threshold` mode; 0 disables the channel.
    #[arg(long, default_value_t = 0.0)]
    pub cutoff: f64,
    /// Compare the raw value instead of |x| in threshold mode.
    #[arg(long)]
    pub raw_compare: bool,
    /// Erasure probability for `random` mode; the keep probability is
    /// 1 - p_erase. 0 disables the channel.
    #[arg(long, default_value_t = 0.0)]
    pub p_erase: f64,
    /// Skip the post-erasure renormalization of surviving rows.
    #[arg(long)]
    pub no_renormalize: bool,
    /// Remove the channel layer entirely (baseline build).
    #[arg(long)]
    pub disable_channel: bool,
    /// Gaussian input-noise level during training; 0 disables.
    #[arg(long, default_value_t = 0.0)]
    pub awgn_std: f64,
    #[arg(long, default_value_t = 0.0)]
    pub awgn_mean: f64,
    #[arg(long, default_value_t = 80)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 2)]
    pub n_layers: usize,
    /// Feed-forward width; defaults to 4 * d_model.
    #[arg(long)]
    pub d_ffn: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub max_len: usize,
    /// Vocabulary cap per side, reserved tokens included.
    #[arg(long, default_value_t = 8000)]
    pub vocab_cap: usize,
    /// Drop pairs whose either side exceeds this many tokens.
    #[arg(long)]
    pub filter_max_tokens: Option<usize>,
    /// Keep only pairs whose English side starts with one of these
    /// comma-separated prefixes.
    #[arg(long)]
    pub filter_prefixes: Option<String>,
    /// Held-out fraction for validation; 0 evaluates on the training
    /// pairs themselves (single-pair overfit runs).
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    pub teacher_forcing: f64,
    /// Warmup steps for the learning-rate schedule; defaults to a tenth of
    /// the total step count, clamped to [400, 4000].
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: TrainCommon,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub struct TrainOutcome {
    pub final_val: ValMetrics,
}

/// The effective channel, with identity configurations removed entirely: an
/// erasure that can never erase is the baseline model, renormalization
/// included (the p = 0 rows of the results table are the plain transformer).
pub fn effective_channel(common: &TrainCommon) -> Result<Option<ChannelConfig>> {
    if common.disable_channel {
        return Ok(None);
    }
    let renormalize = !common.no_renormalize;
    match common.channel_mode.as_str() {
        "random" => {
            if !(0.0..=1.0).contains(&common.p_erase) {
                bail!("--p-erase must lie in [0, 1]");
            }
            let p_keep = 1.0 - common.p_erase;
            if p_keep == 1.0 {
                return Ok(None);
            }
            Ok(Some(ChannelConfig::random_erasure(p_keep, renormalize)?))
        }
        "threshold" => {
            let abs_compare = !common.raw_compare;
            if common.cutoff == 0.0 && abs_compare {
                return Ok(None);
            }
            Ok(Some(ChannelConfig::magnitude_threshold(
                common.cutoff,
                renormalize,
                abs_compare,
            )?))
        }
        other => bail!("unknown --channel-mode {other:?} (random | threshold)"),
    }
}

pub struct PreparedCorpus {
    pub train: Vec<SentencePair>,
    pub val: Vec<SentencePair>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub direction: Direction,
    pub malformed: usize,
    pub filtered: usize,
}

pub fn prepare_corpus(common: &TrainCommon) -> Result<PreparedCorpus> {
    let direction = Direction::parse(&common.direction)?;
    let filters = PairFilters {
        max_tokens: common.filter_max_tokens,
        english_prefixes: common
            .filter_prefixes
            .as_ref()
            .map(|s| s.split(',').map(|p| p.trim().to_string()).collect()),
    };
    let report = load_pairs(&common.data, &filters)?;
    if report.malformed > 0 || report.empty_side > 0 {
        eprintln!(
            "warning: skipped {} malformed and {} empty-side lines",
            report.malformed, report.empty_side
        );
    }
    let (src_vocab, tgt_vocab) = build_vocab(&report.pairs, direction, common.vocab_cap)?;
    let (train, val) = if common.val_fraction == 0.0 {
        (report.pairs.clone(), report.pairs.clone())
    } else {
        let mut split_rng = erasure_core::num::rng::RngStream::new(common.seed, 0xC0);
        split_train_val(&report.pairs, common.val_fraction, &mut split_rng)?
    };
    Ok(PreparedCorpus {
        train,
        val,
        src_vocab,
        tgt_vocab,
        direction,
        malformed: report.malformed + report.empty_side,
        filtered: report.filtered,
    })
}

pub fn build_trainer(common: &TrainCommon, corpus: &PreparedCorpus) -> Result<Trainer> {
    let channel = effective_channel(common)?;
    let awgn = AwgnConfig::new(common.awgn_mean, common.awgn_std)?;
    let model = ModelConfig {
        d_model: common.d_model,
        n_heads: common.n_heads,
        n_layers: common.n_layers,
        d_ffn: common.d_ffn.unwrap_or(4 * common.d_model),
        max_len: common.max_len,
        src_vocab: corpus.src_vocab.len(),
        tgt_vocab: corpus.tgt_vocab.len(),
    };
    let steps_per_epoch = corpus.train.len().div_ceil(common.batch_size);
    let total_steps = steps_per_epoch * common.epochs;
    let warmup = common.warmup.unwrap_or((total_steps / 10).clamp(400, 4000));
    let cfg = TrainConfig {
        epochs: common.epochs,
        batch_size: common.batch_size,
        teacher_forcing_ratio: common.teacher_forcing,
        warmup_steps: warmup,
        seed: common.seed,
        ..TrainConfig::default()
    };
    Ok(Trainer::new(ModelSpec { model, channel, awgn }, cfg)?)
}

pub fn config_echo(common: &TrainCommon, trainer: &Trainer) -> serde_json::Value {
    json!({
        "data": common.data.display().to_string(),
        "direction": common.direction,
        "channel_mode": common.channel_mode,
        "p_erase": common.p_erase,
        "p_keep": 1.0 - common.p_erase,
        "cutoff": common.cutoff,
        "channel": trainer.spec.channel,
        "awgn": trainer.spec.awgn,
        "model": trainer.spec.model,
        "train": trainer.cfg,
        "val_fraction": common.val_fraction,
        "vocab_cap": common.vocab_cap,
        "filter_max_tokens": common.filter_max_tokens,
        "filter_prefixes": common.filter_prefixes,
    })
}

fn metrics_row(epoch: usize, split: &str, loss: f64, accuracy: f64, bleu: Option<f64>) -> Vec<String> {
    vec![
        epoch.to_string(),
        split.to_string(),
        format!("{loss:.6}"),
        format!("{accuracy:.6}"),
        bleu.map(|b| format!("{b:.4}")).unwrap_or_default(),
    ]
}

/// Run the full training loop, writing metrics/checkpoint/vocabs into
/// `out_dir`. Returns the final validation metrics.
pub fn run_train(common: &TrainCommon, out_dir: &Path, quiet: bool) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let corpus = prepare_corpus(common)?;
    let mut trainer = build_trainer(common, &corpus)?;

    let mut manifest = RunManifest::start("train", common.seed, config_echo(common, &trainer));

    let metrics_path = out_dir.join("metrics.csv");
    let mut writer = csv::Writer::from_path(&metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))?;
    writer.write_record(["epoch", "split", "loss", "accuracy", "bleu"])?;

    let mut last_val = ValMetrics {
        loss: f64::NAN,
        accuracy: 0.0,
        bleu: 0.0,
    };
    for epoch in 0..common.epochs {
        let train_metrics = trainer.run_epoch(
            &corpus.train,
            corpus.direction,
            &corpus.src_vocab,
            &corpus.tgt_vocab,
        )?;
        last_val = evaluate_split(
            &trainer.model,
            &trainer.spec,
            &corpus.val,
            corpus.direction,
            &corpus.src_vocab,
            &corpus.tgt_vocab,
            common.seed,
        )?;
        writer.write_record(metrics_row(
            epoch + 1,
            "train",
            train_metrics.loss,
            train_metrics.accuracy,
            None,
        ))?;
        writer.write_record(metrics_row(
            epoch + 1,
            "val",
            last_val.loss,
            last_val.accuracy,
            Some(last_val.bleu),
        ))?;
        writer.flush()?;
        if !quiet {
            eprintln!(
                "epoch {:>3}/{}: train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4} bleu {:.2}",
                epoch + 1,
                common.epochs,
                train_metrics.loss,
                train_metrics.accuracy,
                last_val.loss,
                last_val.accuracy,
                last_val.bleu
            );
        }
    }
    writer.flush()?;
    drop(writer);

    let ckpt_path = out_dir.join("model.ckpt");
    save_checkpoint(&trainer, &ckpt_path)?;
    let src_vocab_path = out_dir.join("src_vocab.txt");
    let tgt_vocab_path = out_dir.join("tgt_vocab.txt");
    std::fs::write(&src_vocab_path, corpus.src_vocab.export_lines())?;
    std::fs::write(&tgt_vocab_path, corpus.tgt_vocab.export_lines())?;

    manifest.set_notes(json!({
        "train_pairs": corpus.train.len(),
        "val_pairs": corpus.val.len(),
        "skipped_lines": corpus.malformed,
        "filtered_pairs": corpus.filtered,
        "src_vocab": corpus.src_vocab.len(),
        "tgt_vocab": corpus.tgt_vocab.len(),
        "zero_mask_rows": trainer.zero_rows_seen,
        "final_val_accuracy": last_val.accuracy,
        "final_val_bleu": last_val.bleu,
    }));
    manifest.add_output(&metrics_path);
    manifest.add_output(&ckpt_path);
    manifest.add_output(&src_vocab_path);
    manifest.add_output(&tgt_vocab_path);
    manifest.finish(out_dir)?;

    Ok(TrainOutcome {
        final_val: last_val,
    })
}

pub fn run(args: TrainArgs) -> Result<ExitCode> {
    run_train(&args.common, &args.out_dir, false)?;
    Ok(ExitCode::SUCCESS)
}
