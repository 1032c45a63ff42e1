//! Monte Carlo and exhaustive checks of top-1 preservation.
//!
//! `verify_top1` samples masks; `enumerate_masks` walks all `2^d` of them and
//! is the exact oracle the sampler is compared against at small dimension.
//! Trials derive per-index substreams, so worker count never changes results;
//! reductions run in trial order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{sample_mask, MaskVector};
use crate::error::CoreError;
use crate::margin::{argmax_lowest, margin, masked_scores, GeometrySetup, McResult};
use crate::num::linalg::{Matrix, Vector};
use crate::num::rng::RngStream;

/// Query-vector families spanning the effective-sparsity range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum QDistribution {
    /// Uniform magnitude with random signs: `s_eff = d`.
    Uniform,
    /// Single nonzero coordinate: `s_eff = 1`.
    OneHot,
    /// `|q_k|` proportional to `(k+1)^-alpha` with random signs; interpolates
    /// between the two extremes.
    PowerLaw { alpha: f64 },
}

impl QDistribution {
    pub fn sample(&self, d: usize, rng: &mut RngStream) -> Vector {
        let data: Vec<f64> = match self {
            QDistribution::Uniform => (0..d)
                .map(|_| if rng.bernoulli(0.5) { 1.0 } else { -1.0 })
                .collect(),
            QDistribution::OneHot => {
                let k = rng.below(d as u64) as usize;
                let mut xs = vec![0.0; d];
                xs[k] = 1.0;
                xs
            }
            QDistribution::PowerLaw { alpha } => (0..d)
                .map(|k| {
                    let mag = ((k + 1) as f64).powf(-alpha);
                    if rng.bernoulli(0.5) {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect(),
        };
        Vector::from_vec(data)
            .expect("sampled coordinates are finite")
            .normalized()
            .expect("sampled vector is nonzero")
    }

    pub fn parse(name: &str) -> Result<Self, CoreError> {
        if let Some(alpha) = name.strip_prefix("powerlaw:") {
            let alpha: f64 = alpha.parse().map_err(|_| CoreError::InvalidParam {
                name: "q-dist",
                reason: format!("bad power-law exponent in {name:?}"),
            })?;
            return Ok(QDistribution::PowerLaw { alpha });
        }
        match name {
            "uniform" => Ok(QDistribution::Uniform),
            "onehot" => Ok(QDistribution::OneHot),
            other => Err(CoreError::InvalidParam {
                name: "q-dist",
                reason: format!("unknown distribution {other:?} (uniform | onehot | powerlaw:A)"),
            }),
        }
    }
}

impl std::fmt::Display for QDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QDistribution::Uniform => write!(f, "uniform"),
            QDistribution::OneHot => write!(f, "onehot"),
            QDistribution::PowerLaw { alpha } => write!(f, "powerlaw:{alpha}"),
        }
    }
}

/// `m` independent unit rows of dimension `d`.
pub fn random_unit_embeddings(d: usize, m: usize, rng: &mut RngStream) -> Matrix {
    let rows: Vec<Vector> = (0..m)
        .map(|_| {
            Vector::from_vec((0..d).map(|_| rng.next_gaussian()).collect())
                .expect("finite draws")
                .normalized()
                .expect("gaussian row is nonzero")
        })
        .collect();
    Matrix::from_rows(&rows).expect("rows agree on dimension")
}

/// Setup with a query from `q_dist` and `m` independent random unit
/// embeddings. Scores are all `O(d^-1/2)`, margins small; the family the
/// deviation statistics and calibration run on.
pub fn random_setup(
    d: usize,
    m: usize,
    q_dist: QDistribution,
    rng: &mut RngStream,
) -> Result<GeometrySetup, CoreError> {
    let q = q_dist.sample(d, &mut rng.substream(0));
    let embeddings = random_unit_embeddings(d, m, &mut rng.substream(1));
    GeometrySetup::new(q, embeddings)
}

/// Setup whose top embedding is the query itself (score 1), with `m - 1`
/// random unit runners-up. Gives a wide, controllable margin.
pub fn setup_with_aligned_top(
    d: usize,
    m: usize,
    q_dist: QDistribution,
    rng: &mut RngStream,
) -> Result<GeometrySetup, CoreError> {
    let q = q_dist.sample(d, &mut rng.substream(0));
    let mut rows = vec![q.clone()];
    let mut emb_rng = rng.substream(1);
    for _ in 1..m {
        rows.push(
            Vector::from_vec((0..d).map(|_| emb_rng.next_gaussian()).collect())
                .expect("finite draws")
                .normalized()
                .expect("nonzero"),
        );
    }
    GeometrySetup::from_raw(&q, &rows)
}

enum TrialOutcome {
    Degenerate,
    Kept { flipped: bool, max_dev: f64 },
}

fn run_trial(setup: &GeometrySetup, j_star: usize, pre: &[f64], mask: &MaskVector) -> TrialOutcome {
    let ms = masked_scores(setup, mask).expect("mask length matches setup");
    match ms.normalized {
        None => TrialOutcome::Degenerate,
        Some(post) => {
            let flipped = argmax_lowest(&post) != j_star;
            let mut max_dev = 0.0f64;
            for (s_post, s_pre) in post.iter().zip(pre) {
                max_dev = max_dev.max((s_post - s_pre).abs());
            }
            TrialOutcome::Kept { flipped, max_dev }
        }
    }
}

fn run_trials(
    setup: &GeometrySetup,
    p_keep: f64,
    trials: u64,
    rng: &RngStream,
) -> Result<(u64, u64, Vec<f64>), CoreError> {
    let (j_star, _, pre) = margin(setup)?;
    let d = setup.dim();
    let outcomes: Vec<TrialOutcome> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut trial_rng = rng.substream(t);
            let mask = sample_mask(d, p_keep, &mut trial_rng);
            run_trial(setup, j_star, &pre, &mask)
        })
        .collect();

    let mut flips = 0u64;
    let mut zeros = 0u64;
    let mut devs = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        match o {
            TrialOutcome::Degenerate => zeros += 1,
            TrialOutcome::Kept { flipped, max_dev } => {
                if flipped {
                    flips += 1;
                }
                devs.push(max_dev);
            }
        }
    }
    Ok((flips, zeros, devs))
}

/// Order statistic at `ceil(q * n)` (1-indexed) of a sorted copy.
pub(crate) fn quantile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite deviations"));
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Sample `trials` masks and report flips, score-deviation statistics, and
/// degenerate-mask counts.
pub fn verify_top1(
    setup: &GeometrySetup,
    p_keep: f64,
    trials: u64,
    rng: &RngStream,
) -> Result<McResult, CoreError> {
    if trials == 0 {
        return Err(CoreError::Empty("trials"));
    }
    let (flips, zeros, devs) = run_trials(setup, p_keep, trials, rng)?;
    let kept = trials - zeros;
    let flip_rate = if kept > 0 {
        flips as f64 / kept as f64
    } else {
        0.0
    };
    let max_dev_mean = if devs.is_empty() {
        0.0
    } else {
        devs.iter().sum::<f64>() / devs.len() as f64
    };
    let max_dev_q99 = if devs.is_empty() {
        0.0
    } else {
        quantile(&devs, 0.99)
    };
    Ok(McResult {
        trials,
        flip_count: flips,
        flip_rate,
        max_dev_mean,
        max_dev_q99,
        zero_mask_count: zeros,
    })
}

/// Max score deviations `max_j |s'_j - s_j|` over sampled masks, in trial
/// order, degenerate trials skipped. Feeds quantile fits and calibration.
pub fn deviation_samples(
    setup: &GeometrySetup,
    p_keep: f64,
    trials: u64,
    rng: &RngStream,
) -> Result<Vec<f64>, CoreError> {
    let (_, _, devs) = run_trials(setup, p_keep, trials, rng)?;
    Ok(devs)
}

/// Exact flip probabilities from summing over all `2^d` masks.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ExactFlip {
    /// Probability mass of masks that flip the argmax or erase `q` entirely.
    pub flip_or_degenerate: f64,
    /// Mass of fully-erasing masks alone.
    pub degenerate: f64,
    /// Flip probability conditioned on a surviving query.
    pub flip_given_valid: f64,
}

const MAX_ENUM_DIM: usize = 20;

/// Walk every mask, weight it by `p^keep * (1-p)^(d-keep)`, and accumulate
/// the exact flip probability. Exponential in `d`; capped at `d = 20`.
pub fn enumerate_masks(setup: &GeometrySetup, p_keep: f64) -> Result<ExactFlip, CoreError> {
    let d = setup.dim();
    if d > MAX_ENUM_DIM {
        return Err(CoreError::EnumerationTooLarge {
            d,
            max: MAX_ENUM_DIM,
        });
    }
    if !(0.0..=1.0).contains(&p_keep) {
        return Err(CoreError::InvalidParam {
            name: "p_keep",
            reason: format!("{p_keep} outside [0, 1]"),
        });
    }
    let (j_star, _, _) = margin(setup)?;

    // powers of p and (1-p) up to d, computed once
    let mut pow_p = vec![1.0f64; d + 1];
    let mut pow_q = vec![1.0f64; d + 1];
    for i in 1..=d {
        pow_p[i] = pow_p[i - 1] * p_keep;
        pow_q[i] = pow_q[i - 1] * (1.0 - p_keep);
    }

    let mut flip_or_degenerate = 0.0f64;
    let mut degenerate = 0.0f64;
    let mut flip_valid = 0.0f64;
    let mut bits = vec![0u8; d];
    for mask_bits in 0u64..(1u64 << d) {
        let keep = mask_bits.count_ones() as usize;
        let weight = pow_p[keep] * pow_q[d - keep];
        if weight == 0.0 {
            continue;
        }
        for (k, b) in bits.iter_mut().enumerate() {
            *b = ((mask_bits >> k) & 1) as u8;
        }
        let ms = masked_scores(setup, &MaskVector::from_bits(bits.clone()))?;
        match ms.normalized {
            None => {
                degenerate += weight;
                flip_or_degenerate += weight;
            }
            Some(post) => {
                if argmax_lowest(&post) != j_star {
                    flip_valid += weight;
                    flip_or_degenerate += weight;
                }
            }
        }
    }
    let valid_mass = 1.0 - degenerate;
    let flip_given_valid = if valid_mass > 0.0 {
        flip_valid / valid_mass
    } else {
        0.0
    };
    Ok(ExactFlip {
        flip_or_degenerate,
        degenerate,
        flip_given_valid,
    })
}
