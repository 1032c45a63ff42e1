//! Token accuracy and per-sentence BLEU.
//!
//! The BLEU variant is pinned exactly: modified n-gram precisions for
//! n = 1..=min(4, |hyp|, |ref|), zero counts smoothed by adding 1e-9 to the
//! match count, geometric mean, brevity penalty `exp(min(0, 1 - |ref|/|hyp|))`,
//! scaled to 0–100. Reported scores are per-sentence values averaged
//! arithmetically over the evaluation set.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;

pub use crate::model::corpus_eval;

pub const BLEU_SMOOTH_EPS: f64 = 1e-9;

/// Evaluation summary over a sentence set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    /// Teacher-forced positional accuracy over non-PAD positions, in [0, 1].
    pub token_accuracy: f64,
    /// Arithmetic mean of per-sentence BLEU, 0–100 scale.
    pub bleu_avg: f64,
    pub n_sentences: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_sentence_bleu: Option<Vec<f64>>,
}

/// Fraction of non-PAD reference positions where the hypothesis id matches.
pub fn token_accuracy(hyp_ids: &[u32], ref_ids: &[u32], pad_id: u32) -> Result<f64, CoreError> {
    if hyp_ids.len() != ref_ids.len() {
        return Err(CoreError::DimMismatch {
            left: hyp_ids.len(),
            right: ref_ids.len(),
        });
    }
    let mut total = 0usize;
    let mut hit = 0usize;
    for (h, r) in hyp_ids.iter().zip(ref_ids) {
        if *r == pad_id {
            continue;
        }
        total += 1;
        if h == r {
            hit += 1;
        }
    }
    if total == 0 {
        return Err(CoreError::Empty("non-PAD reference positions"));
    }
    Ok(hit as f64 / total as f64)
}

fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *counts.entry(&tokens[i..i + n]).or_insert(0) += 1;
        }
    }
    counts
}

/// Per-sentence BLEU in [0, 100]; empty hypotheses score 0 by convention.
pub fn sentence_bleu(hyp: &[String], reference: &[String], max_n: usize) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let n_max = max_n.min(hyp.len()).min(reference.len()).max(1);
    let mut log_sum = 0.0f64;
    for n in 1..=n_max {
        let ref_counts = ngram_counts(reference, n);
        let hyp_counts = ngram_counts(hyp, n);
        let total: usize = hyp_counts.values().sum();
        let mut matches = 0usize;
        for (gram, count) in &hyp_counts {
            if let Some(rc) = ref_counts.get(gram) {
                matches += count.min(rc);
            }
        }
        let numerator = if matches == 0 {
            BLEU_SMOOTH_EPS
        } else {
            matches as f64
        };
        log_sum += (numerator / total as f64).ln();
    }
    let geo = (log_sum / n_max as f64).exp();
    let brevity = (1.0 - reference.len() as f64 / hyp.len() as f64).min(0.0).exp();
    100.0 * brevity * geo
}
