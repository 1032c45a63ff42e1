//! Top-1 margin geometry under coordinate dropout.
//!
//! Everything here works with a query vector `q` and a set of unit output
//! embeddings `v_j`. The pre-dropout prediction is `argmax_j <q, v_j>`; a
//! Bernoulli keep-mask is applied to `q` only (never to the embeddings), the
//! survivor is renormalized, and the question is whether the argmax moved.
//!
//! The deviation of every post-mask score from its pre-mask value
//! concentrates at rate `sqrt(log(M/delta) / (p_keep * s_eff(q)))`, where the
//! effective sparsity `s_eff(q) = ||q||_2^4 / ||q||_4^4` counts how many
//! coordinates carry the energy of `q`. The bound evaluators below expose
//! that rate, its numerator/denominator pieces, and the resulting
//! preservation guarantee `gamma > 2 * epsilon`.

mod calibrate;
mod mc;

pub use calibrate::{
    calibrate_c, default_grid, fit_log_log_slope, holdout_grid, CalibrationOutcome, CellOutcome,
    GridCell, DEFAULT_C, DEFAULT_CALIBRATION_JSON, DEFAULT_C_VERSION,
};
pub use mc::{
    deviation_samples, enumerate_masks, random_setup, random_unit_embeddings,
    setup_with_aligned_top, verify_top1, ExactFlip, QDistribution,
};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::channel::MaskVector;
use crate::error::CoreError;
use crate::num::linalg::{dot_slices, Matrix, Vector};

/// A query vector and `M >= 2` unit output embeddings.
#[derive(Clone, Debug)]
pub struct GeometrySetup {
    q: Vector,
    embeddings: Matrix,
}

const UNIT_TOL: f64 = 1e-9;

/// Renormalize until the recomputed norm is exactly 1.0 (a couple of passes
/// at most); keeps "apply the all-ones mask" a bitwise no-op downstream.
fn normalize_exact(q: &Vector) -> Result<Vector, CoreError> {
    let mut out = q.normalized()?;
    for _ in 0..4 {
        let n = out.lp_norm(crate::num::linalg::NormOrder::L2);
        if n == 1.0 {
            break;
        }
        out = out.normalized()?;
    }
    Ok(out)
}

impl GeometrySetup {
    /// Validate a unit-norm query and unit-norm embedding rows.
    pub fn new(q: Vector, embeddings: Matrix) -> Result<Self, CoreError> {
        if embeddings.rows() < 2 {
            return Err(CoreError::InvalidParam {
                name: "embeddings",
                reason: format!("need M >= 2 rows, got {}", embeddings.rows()),
            });
        }
        if q.len() != embeddings.cols() {
            return Err(CoreError::DimMismatch {
                left: q.len(),
                right: embeddings.cols(),
            });
        }
        let qn = q.lp_norm(crate::num::linalg::NormOrder::L2);
        if (qn - 1.0).abs() > UNIT_TOL {
            return Err(CoreError::InvalidParam {
                name: "q",
                reason: format!("norm {qn} not within {UNIT_TOL} of 1"),
            });
        }
        for r in 0..embeddings.rows() {
            let row = Vector::from_slice(embeddings.row(r))?;
            let n = row.lp_norm(crate::num::linalg::NormOrder::L2);
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(CoreError::InvalidParam {
                    name: "embedding row",
                    reason: format!("row {r} has norm {n}"),
                });
            }
        }
        Ok(GeometrySetup {
            q: normalize_exact(&q)?,
            embeddings,
        })
    }

    /// Normalize arbitrary nonzero inputs into a valid setup.
    pub fn from_raw(q: &Vector, rows: &[Vector]) -> Result<Self, CoreError> {
        let unit_rows: Vec<Vector> = rows
            .iter()
            .map(|r| r.normalized())
            .collect::<Result<_, _>>()?;
        Self::new(normalize_exact(q)?, Matrix::from_rows(&unit_rows)?)
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn count(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn query(&self) -> &Vector {
        &self.q
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }
}

/// Parameters of the preservation bound.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TheoremParams {
    /// Keep probability, in (0, 1].
    pub p_keep: f64,
    /// Failure probability, in (0, 1).
    pub delta: f64,
    /// Leading constant; calibrated empirically, see [`DEFAULT_C`].
    pub c: f64,
}

impl TheoremParams {
    pub fn new(p_keep: f64, delta: f64, c: f64) -> Result<Self, CoreError> {
        if !(p_keep > 0.0 && p_keep <= 1.0) {
            return Err(CoreError::InvalidParam {
                name: "p_keep",
                reason: format!("{p_keep} outside (0, 1]"),
            });
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(CoreError::InvalidParam {
                name: "delta",
                reason: format!("{delta} outside (0, 1)"),
            });
        }
        if !(c > 0.0) {
            return Err(CoreError::InvalidParam {
                name: "c",
                reason: format!("{c} must be positive"),
            });
        }
        Ok(TheoremParams { p_keep, delta, c })
    }
}

/// Margin analysis of one setup, with the preservation verdict.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarginReport {
    pub j_star: usize,
    pub gamma: f64,
    pub s_eff: f64,
    pub epsilon: f64,
    /// `gamma > 2 * epsilon`: top-1 is guaranteed preserved with probability
    /// at least `1 - delta`.
    pub guaranteed: bool,
    pub p_keep: f64,
    pub delta: f64,
    pub c: f64,
    pub scores_pre: Vec<f64>,
}

impl MarginReport {
    /// Flat key-value JSON with provenance fields.
    pub fn to_json(&self, seed: u64, stream_id: u64) -> String {
        let mut doc = serde_json::to_value(self).expect("report serializes");
        let map = doc.as_object_mut().expect("object");
        map.insert("seed".into(), json!(seed));
        map.insert("stream_id".into(), json!(stream_id));
        map.insert("version".into(), json!(crate::VERSION));
        serde_json::to_string_pretty(&doc).expect("report serializes")
    }
}

/// Monte Carlo summary of mask trials on one setup.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McResult {
    pub trials: u64,
    pub flip_count: u64,
    /// Flips among non-degenerate trials.
    pub flip_rate: f64,
    pub max_dev_mean: f64,
    pub max_dev_q99: f64,
    pub zero_mask_count: u64,
}

impl McResult {
    /// Flips-or-degenerate fraction over all trials; the quantity the
    /// exhaustive enumeration reports.
    pub fn flip_or_degenerate_rate(&self) -> f64 {
        (self.flip_count + self.zero_mask_count) as f64 / self.trials as f64
    }

    pub fn to_json(&self, seed: u64, stream_id: u64) -> String {
        let mut doc = serde_json::to_value(self).expect("result serializes");
        let map = doc.as_object_mut().expect("object");
        map.insert("seed".into(), json!(seed));
        map.insert("stream_id".into(), json!(stream_id));
        map.insert("version".into(), json!(crate::VERSION));
        serde_json::to_string_pretty(&doc).expect("result serializes")
    }
}

/// `||q||_2^4 / ||q||_4^4`, in `[1, d]`. Scale-invariant; 1 at a one-hot
/// vector, `d` at a uniform one.
pub fn effective_sparsity(q: &Vector) -> Result<f64, CoreError> {
    let mut s2 = 0.0f64;
    let mut c2 = 0.0f64;
    let mut s4 = 0.0f64;
    let mut c4 = 0.0f64;
    for x in q.as_slice() {
        let sq = x * x;
        let t = s2 + sq;
        c2 += if s2.abs() >= sq.abs() {
            (s2 - t) + sq
        } else {
            (sq - t) + s2
        };
        s2 = t;
        let quad = sq * sq;
        let t4 = s4 + quad;
        c4 += if s4.abs() >= quad.abs() {
            (s4 - t4) + quad
        } else {
            (quad - t4) + s4
        };
        s4 = t4;
    }
    let sum_sq = s2 + c2;
    let sum_quad = s4 + c4;
    if sum_sq == 0.0 {
        return Err(CoreError::DegenerateMask);
    }
    Ok(sum_sq * sum_sq / sum_quad)
}

/// Pre-dropout argmax, margin, and scores. Rejects an exact tie at the top
/// (the margin hypothesis requires `gamma > 0`). Argmax ties elsewhere break
/// to the lowest index.
pub fn margin(setup: &GeometrySetup) -> Result<(usize, f64, Vec<f64>), CoreError> {
    let scores = scores_against(setup.query().as_slice(), setup.embeddings());
    let j_star = argmax_lowest(&scores);
    let mut runner_up = f64::NEG_INFINITY;
    for (j, s) in scores.iter().enumerate() {
        if j != j_star && *s > runner_up {
            runner_up = *s;
        }
    }
    let gamma = scores[j_star] - runner_up;
    if gamma <= 0.0 {
        return Err(CoreError::ZeroMargin);
    }
    Ok((j_star, gamma, scores))
}

pub(crate) fn scores_against(q: &[f64], embeddings: &Matrix) -> Vec<f64> {
    (0..embeddings.rows())
        .map(|j| dot_slices(q, embeddings.row(j)))
        .collect()
}

/// First index attaining the maximum.
pub(crate) fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// The uniform score-deviation bound
/// `epsilon = C * sqrt(ln(M/delta) / (p_keep * s_eff))`.
pub fn deviation_bound(params: &TheoremParams, s_eff: f64, m: usize) -> f64 {
    params.c * ((m as f64 / params.delta).ln() / (params.p_keep * s_eff)).sqrt()
}

/// Concentration bound for the raw (pre-normalization) scores:
/// `C * sqrt(p_keep * ||q||_4^2 * ln(M/delta))`.
pub fn numerator_bound(params: &TheoremParams, q: &Vector, m: usize) -> f64 {
    let l4 = q.lp_norm(crate::num::linalg::NormOrder::L4);
    params.c * (params.p_keep * l4 * l4 * (m as f64 / params.delta).ln()).sqrt()
}

/// Concentration bound for the masked norm around `sqrt(p_keep)`:
/// `C * sqrt(ln(2/delta) / (p_keep * s_eff))`.
pub fn denominator_bound(params: &TheoremParams, s_eff: f64) -> f64 {
    params.c * ((2.0 / params.delta).ln() / (params.p_keep * s_eff)).sqrt()
}

/// Post-mask scores for one explicit mask.
#[derive(Clone, Debug)]
pub struct MaskedScores {
    /// Raw masked scores `S_j = <m ⊙ q, v_j>`.
    pub raw: Vec<f64>,
    /// Masked norm `R = ||m ⊙ q||_2`.
    pub norm: f64,
    /// Normalized scores `S_j / R`, or `None` when the mask erased `q`
    /// entirely (degenerate; flagged, not an error).
    pub normalized: Option<Vec<f64>>,
}

/// Score the masked query against every embedding.
pub fn masked_scores(setup: &GeometrySetup, mask: &MaskVector) -> Result<MaskedScores, CoreError> {
    if mask.len() != setup.dim() {
        return Err(CoreError::DimMismatch {
            left: mask.len(),
            right: setup.dim(),
        });
    }
    let masked = crate::channel::apply_mask(setup.query(), mask)?;
    let raw = scores_against(masked.as_slice(), setup.embeddings());
    let norm = masked.lp_norm(crate::num::linalg::NormOrder::L2);
    let normalized = if norm > 0.0 {
        Some(raw.iter().map(|s| s / norm).collect())
    } else {
        None
    };
    Ok(MaskedScores {
        raw,
        norm,
        normalized,
    })
}

/// Assemble the margin report for one setup under given parameters.
pub fn margin_report(
    setup: &GeometrySetup,
    params: &TheoremParams,
) -> Result<MarginReport, CoreError> {
    let (j_star, gamma, scores_pre) = margin(setup)?;
    let s_eff = effective_sparsity(setup.query())?;
    let epsilon = deviation_bound(params, s_eff, setup.count());
    Ok(MarginReport {
        j_star,
        gamma,
        s_eff,
        epsilon,
        guaranteed: gamma > 2.0 * epsilon,
        p_keep: params.p_keep,
        delta: params.delta,
        c: params.c,
        scores_pre,
    })
}
