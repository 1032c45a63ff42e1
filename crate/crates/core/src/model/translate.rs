//! Greedy decoding, attention export, and validation-set evaluation.
//!
//! Evaluation keeps the erasure channel in the loop (degraded inputs are the
//! point of the measurement) but draws its masks from a fixed per-sentence
//! eval stream, so identical checkpoints produce identical reports. Gaussian
//! input noise is a training-time perturbation and stays off here.

use rayon::prelude::*;

use crate::corpus::{frame_pair, Direction, SentencePair, Vocab, END_ID, PAD_ID, START_ID};
use crate::error::CoreError;
use crate::metrics::{sentence_bleu, token_accuracy, EvalReport};
use crate::model::train::{argmax_row, stream};
use crate::model::transformer::{CollectedAttention, TransformerModel};
use crate::model::ModelSpec;
use crate::num::rng::RngStream;
use crate::num::tape::Tape;

/// The per-sentence channel stream evaluation uses: fixed, derived from the
/// run seed and the sentence index only.
pub fn eval_sentence_stream(eval_seed: u64, sentence_index: u64) -> RngStream {
    RngStream::new(eval_seed, 0)
        .substream(stream::EVAL)
        .substream(sentence_index)
}

/// One greedy decode, with optionally retained cross-attention weights.
pub struct Translation {
    /// Generated target ids, END included when reached.
    pub ids: Vec<u32>,
    pub reached_end: bool,
    /// Cross-attention weights of the final decode pass, when retained.
    pub attention: Option<CollectedAttention<f32>>,
}

impl Translation {
    /// Generated tokens as text (END stripped).
    pub fn tokens(&self, tgt_vocab: &Vocab) -> Vec<String> {
        self.ids
            .iter()
            .filter(|id| **id != END_ID)
            .map(|id| tgt_vocab.decode(*id).to_string())
            .collect()
    }
}

/// Greedy argmax decoding from START until END or the length cap. The
/// channel mask is drawn once per sentence from `sentence_rng` and shared by
/// every decode step.
pub fn greedy_translate(
    model: &TransformerModel,
    spec: &ModelSpec,
    src_ids: &[u32],
    sentence_rng: &RngStream,
    retain_attention: bool,
) -> Result<Translation, CoreError> {
    let fwd = model.forward();
    let mut tape = Tape::new();
    let enc = fwd.encode(&mut tape, src_ids, None)?;
    let channel = spec.channel.map(|c| (c, sentence_rng.substream(0)));
    let (channelled, _) = fwd.interface_channel(&mut tape, enc, channel.as_ref())?;

    let mut prefix = vec![START_ID];
    let mut ids = Vec::new();
    let mut reached_end = false;
    while prefix.len() <= model.cfg.max_len {
        let logits = fwd.decode(&mut tape, channelled, &prefix, None)?;
        let next = argmax_row(tape.value(logits).row(prefix.len() - 1)) as u32;
        ids.push(next);
        if next == END_ID {
            reached_end = true;
            break;
        }
        if prefix.len() == model.cfg.max_len {
            break;
        }
        prefix.push(next);
    }

    let attention = if retain_attention {
        let mut collected = CollectedAttention::new();
        fwd.decode(&mut tape, channelled, &prefix, Some(&mut collected))?;
        Some(collected)
    } else {
        None
    };
    Ok(Translation {
        ids,
        reached_end,
        attention,
    })
}

/// One `(layer, head)` cross-attention heatmap serialized as CSV: header row
/// holds the source tokens, the first column the hypothesis tokens.
pub struct AttentionExport {
    pub layer: usize,
    pub head: usize,
    pub csv: String,
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Serialize retained weights against token labels. The hypothesis tokens
/// label rows (one per generated token), source tokens label columns.
pub fn export_attention(
    translation: &Translation,
    src_tokens: &[String],
    tgt_vocab: &Vocab,
) -> Result<Vec<AttentionExport>, CoreError> {
    let attention = translation.attention.as_ref().ok_or(CoreError::InvalidParam {
        name: "attention",
        reason: "weights were not retained by this translation".into(),
    })?;
    let hyp_labels: Vec<String> = translation
        .ids
        .iter()
        .map(|id| tgt_vocab.decode(*id).to_string())
        .collect();
    let mut out = Vec::new();
    for (layer, head, weights) in &attention.cross {
        let mut csv = String::new();
        csv.push_str("hyp\\src");
        for tok in src_tokens {
            csv.push(',');
            csv.push_str(&csv_field(tok));
        }
        csv.push('\n');
        for r in 0..weights.rows() {
            let label = hyp_labels.get(r).map(|s| s.as_str()).unwrap_or("?");
            csv.push_str(&csv_field(label));
            for x in weights.row(r) {
                csv.push(',');
                csv.push_str(&format!("{:.6}", x));
            }
            csv.push('\n');
        }
        out.push(AttentionExport {
            layer: *layer,
            head: *head,
            csv,
        });
    }
    Ok(out)
}

/// Pooled split metrics: token-weighted loss and accuracy from a
/// teacher-forced pass, mean per-sentence BLEU from greedy decoding.
#[derive(Clone, Copy, Debug)]
pub struct ValMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub bleu: f64,
}

struct SentenceEval {
    ce_sum: f64,
    tokens: u64,
    accuracy: f64,
    bleu: f64,
}

fn eval_sentence(
    model: &TransformerModel,
    spec: &ModelSpec,
    pair: &SentencePair,
    direction: Direction,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    sent_rng: &RngStream,
) -> Result<SentenceEval, CoreError> {
    let max_len = model.cfg.max_len;
    let (src_row, src_len, tgt_row, tgt_len) =
        frame_pair(pair, direction, src_vocab, tgt_vocab, max_len);
    let src = &src_row[..src_len];
    let tgt = &tgt_row[..tgt_len];
    let dec_input = &tgt[..tgt_len - 1];
    let targets = &tgt[1..tgt_len];

    // teacher-forced pass for loss and positional accuracy
    let fwd = model.forward();
    let mut tape = Tape::new();
    let channel = spec.channel.map(|c| (c, sent_rng.substream(0)));
    let enc = fwd.encode(&mut tape, src, None)?;
    let (channelled, _) = fwd.interface_channel(&mut tape, enc, channel.as_ref())?;
    let logits = fwd.decode(&mut tape, channelled, dec_input, None)?;
    let active = vec![true; targets.len()];
    let loss_id = tape.cross_entropy_mean(logits, targets, &active)?;
    let ce = tape.value(loss_id).get(0, 0) as f64;

    // padded positional comparison
    let mut hyp_padded = vec![PAD_ID; max_len - 1];
    let logit_vals = tape.value(logits);
    for (t, _) in targets.iter().enumerate() {
        hyp_padded[t] = argmax_row(logit_vals.row(t)) as u32;
    }
    let ref_padded = &tgt_row[1..];
    let accuracy = token_accuracy(&hyp_padded, ref_padded, PAD_ID)?;

    // greedy pass for BLEU against the full (untruncated) reference
    let translation = greedy_translate(model, spec, src, &sent_rng.substream(1), false)?;
    let hyp_tokens = translation.tokens(tgt_vocab);
    let reference = pair.oriented(direction).1;
    let bleu = sentence_bleu(&hyp_tokens, reference, 4);

    Ok(SentenceEval {
        ce_sum: ce * targets.len() as f64,
        tokens: targets.len() as u64,
        accuracy,
        bleu,
    })
}

fn eval_split_inner(
    model: &TransformerModel,
    spec: &ModelSpec,
    pairs: &[SentencePair],
    direction: Direction,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    eval_seed: u64,
) -> Result<(ValMetrics, Vec<f64>), CoreError> {
    if pairs.is_empty() {
        return Err(CoreError::Empty("evaluation set"));
    }
    let evals: Vec<Result<SentenceEval, CoreError>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            eval_sentence(
                model,
                spec,
                pair,
                direction,
                src_vocab,
                tgt_vocab,
                &eval_sentence_stream(eval_seed, i as u64),
            )
        })
        .collect();

    let mut ce_sum = 0.0f64;
    let mut tokens = 0u64;
    let mut acc_weighted = 0.0f64;
    let mut bleus = Vec::with_capacity(pairs.len());
    for e in evals {
        let e = e?;
        ce_sum += e.ce_sum;
        tokens += e.tokens;
        acc_weighted += e.accuracy * e.tokens as f64;
        bleus.push(e.bleu);
    }
    let bleu = bleus.iter().sum::<f64>() / bleus.len() as f64;
    Ok((
        ValMetrics {
            loss: ce_sum / tokens as f64,
            accuracy: acc_weighted / tokens as f64,
            bleu,
        },
        bleus,
    ))
}

/// Split-level metrics for the per-epoch CSV.
pub fn evaluate_split(
    model: &TransformerModel,
    spec: &ModelSpec,
    pairs: &[SentencePair],
    direction: Direction,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    eval_seed: u64,
) -> Result<ValMetrics, CoreError> {
    Ok(eval_split_inner(model, spec, pairs, direction, src_vocab, tgt_vocab, eval_seed)?.0)
}

/// Full evaluation report over a validation set.
pub fn corpus_eval(
    model: &TransformerModel,
    spec: &ModelSpec,
    pairs: &[SentencePair],
    direction: Direction,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    eval_seed: u64,
    keep_per_sentence: bool,
) -> Result<EvalReport, CoreError> {
    let (metrics, bleus) =
        eval_split_inner(model, spec, pairs, direction, src_vocab, tgt_vocab, eval_seed)?;
    Ok(EvalReport {
        token_accuracy: metrics.accuracy,
        bleu_avg: metrics.bleu,
        n_sentences: pairs.len(),
        per_sentence_bleu: keep_per_sentence.then_some(bleus),
    })
}
