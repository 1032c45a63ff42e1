//! Stochastic perturbations applied to representation vectors: Bernoulli
//! coordinate erasure, magnitude-threshold erasure, post-erasure
//! renormalization, and additive white Gaussian noise.
//!
//! Two erasure mechanisms exist side by side and are never conflated:
//! `RandomErasure` draws i.i.d. Bernoulli keep-bits with probability `param`,
//! while `MagnitudeThreshold` keeps a coordinate iff its (absolute, by
//! default) value clears the cutoff `param`. Reports always state both the
//! mode and the parameter.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::num::linalg::{Matrix, Vector};
use crate::num::real::Real;
use crate::num::rng::RngStream;

/// Which erasure mechanism a channel applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelMode {
    /// Keep each coordinate independently with probability `param`.
    RandomErasure,
    /// Keep coordinate `j` iff its compared value is `>= param`.
    MagnitudeThreshold,
}

/// Erasure-channel configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub mode: ChannelMode,
    /// Keep probability for `RandomErasure`; cutoff for `MagnitudeThreshold`.
    pub param: f64,
    /// L2-normalize each surviving (nonzero) row after erasure.
    pub renormalize_after: bool,
    /// For `MagnitudeThreshold`: compare `|x_j|` rather than the raw value,
    /// so signed activations are not erased wholesale.
    pub abs_compare: bool,
}

impl ChannelConfig {
    pub fn random_erasure(p_keep: f64, renormalize_after: bool) -> Result<Self, CoreError> {
        Self::validate_param(p_keep)?;
        Ok(ChannelConfig {
            mode: ChannelMode::RandomErasure,
            param: p_keep,
            renormalize_after,
            abs_compare: true,
        })
    }

    pub fn magnitude_threshold(
        cutoff: f64,
        renormalize_after: bool,
        abs_compare: bool,
    ) -> Result<Self, CoreError> {
        Self::validate_param(cutoff)?;
        Ok(ChannelConfig {
            mode: ChannelMode::MagnitudeThreshold,
            param: cutoff,
            renormalize_after,
            abs_compare,
        })
    }

    fn validate_param(p: f64) -> Result<(), CoreError> {
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(CoreError::InvalidParam {
                name: "channel param",
                reason: format!("{p} outside [0, 1]"),
            });
        }
        Ok(())
    }

    /// Keep-mask for one row under this channel. `RandomErasure` consumes
    /// draws from `rng`; `MagnitudeThreshold` is a pure function of the row.
    pub fn mask_for_row<T: Real>(&self, row: &[T], rng: &mut RngStream) -> MaskVector {
        match self.mode {
            ChannelMode::RandomErasure => sample_mask(row.len(), self.param, rng),
            ChannelMode::MagnitudeThreshold => {
                let bits = row
                    .iter()
                    .map(|x| {
                        let v = if self.abs_compare {
                            x.to_f64().abs()
                        } else {
                            x.to_f64()
                        };
                        u8::from(v >= self.param)
                    })
                    .collect();
                MaskVector::from_bits(bits)
            }
        }
    }
}

/// Keep-bit vector for one masked row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskVector {
    bits: Vec<u8>,
}

impl MaskVector {
    pub fn from_bits(bits: Vec<u8>) -> Self {
        debug_assert!(bits.iter().all(|b| *b <= 1));
        MaskVector { bits }
    }

    pub fn all_ones(d: usize) -> Self {
        MaskVector { bits: vec![1; d] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn keep_count(&self) -> usize {
        self.bits.iter().map(|b| *b as usize).sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.bits.iter().all(|b| *b == 0)
    }
}

/// Gaussian input-noise configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AwgnConfig {
    pub mean: f64,
    pub std: f64,
}

impl AwgnConfig {
    pub fn new(mean: f64, std: f64) -> Result<Self, CoreError> {
        if std < 0.0 || !std.is_finite() || !mean.is_finite() {
            return Err(CoreError::InvalidParam {
                name: "awgn std",
                reason: format!("std {std} must be finite and >= 0"),
            });
        }
        Ok(AwgnConfig { mean, std })
    }

    pub fn off() -> Self {
        AwgnConfig {
            mean: 0.0,
            std: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.mean == 0.0 && self.std == 0.0
    }
}

/// Draw a keep-mask of length `d`: each bit is 1 independently with
/// probability `p_keep`.
pub fn sample_mask(d: usize, p_keep: f64, rng: &mut RngStream) -> MaskVector {
    let bits = (0..d).map(|_| u8::from(rng.bernoulli(p_keep))).collect();
    MaskVector::from_bits(bits)
}

/// Elementwise product of a vector with a keep-mask.
pub fn apply_mask<T: Real>(x: &Vector<T>, m: &MaskVector) -> Result<Vector<T>, CoreError> {
    if x.len() != m.len() {
        return Err(CoreError::DimMismatch {
            left: x.len(),
            right: m.len(),
        });
    }
    let data = x
        .as_slice()
        .iter()
        .zip(m.bits())
        .map(|(v, b)| if *b == 1 { *v } else { T::ZERO })
        .collect();
    Ok(Vector::from_vec(data).expect("masking preserves finiteness"))
}

/// Coordinate-wise erasure by raw-value comparison: keep `x_j` iff
/// `x_j >= cutoff`, else zero.
pub fn bec_threshold<T: Real>(x: &Vector<T>, cutoff: f64) -> Vector<T> {
    let data = x
        .as_slice()
        .iter()
        .map(|v| if v.to_f64() >= cutoff { *v } else { T::ZERO })
        .collect();
    Vector::from_vec(data).expect("thresholding preserves finiteness")
}

/// Result of pushing a batch of row vectors through an erasure channel.
#[derive(Clone, Debug)]
pub struct ChannelOutput<T: Real> {
    pub matrix: Matrix<T>,
    /// Rows fully erased by the mask; passed through as zeros, not resampled.
    pub zero_rows: usize,
}

/// Apply the configured channel independently to each row of `x`. Each row
/// derives its own substream from the row index, so rows can be processed in
/// any order (or in parallel) with identical results.
pub fn channel_forward<T: Real>(
    x: &Matrix<T>,
    cfg: &ChannelConfig,
    rng: &RngStream,
) -> ChannelOutput<T> {
    let mut out = x.clone();
    let mut zero_rows = 0usize;
    for r in 0..out.rows() {
        let mut row_rng = rng.substream(r as u64);
        let mask = cfg.mask_for_row(out.row(r), &mut row_rng);
        let row = out.row_mut(r);
        for (v, b) in row.iter_mut().zip(mask.bits()) {
            if *b == 0 {
                *v = T::ZERO;
            }
        }
        if mask.is_all_zero() || row.iter().all(|v| *v == T::ZERO) {
            zero_rows += 1;
            continue;
        }
        if cfg.renormalize_after {
            let mut sq = T::ZERO;
            for v in row.iter() {
                sq += *v * *v;
            }
            let norm = sq.sqrt();
            if norm == T::ZERO {
                zero_rows += 1;
            } else {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
    }
    ChannelOutput {
        matrix: out,
        zero_rows,
    }
}

/// `x + N` with i.i.d. Gaussian(mean, std^2) entries. `mean = std = 0`
/// returns the input bit-for-bit.
pub fn add_awgn<T: Real>(x: &Matrix<T>, cfg: &AwgnConfig, rng: &mut RngStream) -> Matrix<T> {
    if cfg.is_identity() {
        return x.clone();
    }
    let mut out = x.clone();
    if cfg.std == 0.0 {
        let m = T::from_f64(cfg.mean);
        for v in out.data_mut() {
            *v += m;
        }
        return out;
    }
    for v in out.data_mut() {
        *v += T::from_f64(cfg.mean + cfg.std * rng.next_gaussian());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_slice(xs).unwrap()
    }

    #[test]
    fn mask_with_certain_keep_is_all_ones() {
        let mut rng = RngStream::new(1, 0);
        let m = sample_mask(5, 1.0, &mut rng);
        assert_eq!(m.bits(), &[1, 1, 1, 1, 1]);
        assert_eq!(m.keep_count(), 5);
    }

    #[test]
    fn mask_with_zero_keep_is_all_zeros() {
        let mut rng = RngStream::new(1, 0);
        let m = sample_mask(5, 0.0, &mut rng);
        assert_eq!(m.bits(), &[0, 0, 0, 0, 0]);
        assert!(m.is_all_zero());
    }

    /// ln C(n, k) via a running log-factorial, for the exact tail below.
    fn ln_choose(lnfact: &[f64], n: usize, k: usize) -> f64 {
        lnfact[n] - lnfact[k] - lnfact[n - k]
    }

    #[test]
    fn mask_keep_fraction_concentrates_like_a_binomial() {
        let d = 10_000usize;
        let p = 0.3;
        // exact binomial tail: P(|K/d - p| > 0.015)
        let lo = ((p - 0.015) * d as f64).ceil() as usize;
        let hi = ((p + 0.015) * d as f64).floor() as usize;
        let mut lnfact = vec![0.0f64; d + 1];
        for i in 1..=d {
            lnfact[i] = lnfact[i - 1] + (i as f64).ln();
        }
        let mut inside = 0.0;
        for k in lo..=hi {
            inside += (ln_choose(&lnfact, d, k)
                + k as f64 * p.ln()
                + (d - k) as f64 * (1.0 - p).ln())
            .exp();
        }
        let tail = 1.0 - inside;
        assert!(tail < 0.01, "tail {tail} too fat for the 99% claim");

        let n_seeds = 200;
        let mut outside = 0;
        for seed in 0..n_seeds {
            let mut rng = RngStream::new(seed, 0);
            let m = sample_mask(d, p, &mut rng);
            let frac = m.keep_count() as f64 / d as f64;
            if (frac - p).abs() > 0.015 {
                outside += 1;
            }
        }
        // expected outside count is n_seeds * tail (about 0.2); allow slack
        assert!(outside <= 4, "{outside}/{n_seeds} seeds outside the band");
    }

    #[test]
    fn apply_mask_by_definition() {
        let m = MaskVector::from_bits(vec![1, 0, 1]);
        let y = apply_mask(&v(&[1.0, 2.0, 3.0]), &m).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 0.0, 3.0]);
    }

    #[test]
    fn all_ones_mask_is_bitwise_identity() {
        let x = v(&[0.25, -1.5, 3.75]);
        let y = apply_mask(&x, &MaskVector::all_ones(3)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn all_zero_mask_gives_zero_vector() {
        let y = apply_mask(&v(&[1.0, 2.0]), &MaskVector::from_bits(vec![0, 0])).unwrap();
        assert_eq!(y.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn apply_mask_length_mismatch() {
        let err = apply_mask(&v(&[1.0]), &MaskVector::from_bits(vec![1, 0])).unwrap_err();
        assert_eq!(err, CoreError::DimMismatch { left: 1, right: 2 });
    }

    #[test]
    fn threshold_keeps_values_at_or_above_cutoff() {
        let y = bec_threshold(&v(&[0.7, 0.3, 0.5]), 0.5);
        assert_eq!(y.as_slice(), &[0.7, 0.0, 0.5]);
    }

    #[test]
    fn threshold_zero_cutoff_is_identity_for_nonnegative() {
        let x = v(&[0.0, 0.4, 1.0]);
        assert_eq!(bec_threshold(&x, 0.0), x);
    }

    #[test]
    fn threshold_cutoff_one_erases_everything_below() {
        let y = bec_threshold(&v(&[0.2, 0.9]), 1.0);
        assert_eq!(y.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_channel_passes_matrix_bitwise() {
        let x = Matrix::from_vec(3, 4, (0..12).map(|i| i as f64 * 0.37 - 2.0).collect()).unwrap();
        let cfg = ChannelConfig::random_erasure(1.0, false).unwrap();
        let out = channel_forward(&x, &cfg, &RngStream::new(7, 0));
        assert_eq!(out.matrix, x);
        assert_eq!(out.zero_rows, 0);
    }

    #[test]
    fn zero_cutoff_threshold_preserves_nonnegative_unit_rows() {
        let row = v(&[0.6, 0.8]).normalized().unwrap();
        let x = Matrix::from_rows(&[row.clone()]).unwrap();
        let cfg = ChannelConfig::magnitude_threshold(0.0, true, true).unwrap();
        let out = channel_forward(&x, &cfg, &RngStream::new(7, 0));
        for (a, b) in out.matrix.row(0).iter().zip(row.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn renormalized_rows_have_unit_or_zero_norm() {
        let mut rng = RngStream::new(11, 3);
        let x = Matrix::from_vec(64, 16, (0..1024).map(|_| rng.next_gaussian()).collect()).unwrap();
        let cfg = ChannelConfig::random_erasure(0.5, true).unwrap();
        let out = channel_forward(&x, &cfg, &RngStream::new(11, 4));
        for r in 0..out.matrix.rows() {
            let norm: f64 = out.matrix.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(
                (norm - 1.0).abs() < 1e-9 || norm == 0.0,
                "row {r} norm {norm}"
            );
        }
    }

    #[test]
    fn masks_are_independent_across_rows() {
        let cfg = ChannelConfig::random_erasure(0.5, false).unwrap();
        let d = 1000;
        let runs = 100u64;
        let x = Matrix::from_vec(2, d, vec![1.0f64; 2 * d]).unwrap();
        let mut a_bits = Vec::with_capacity(d * runs as usize);
        let mut b_bits = Vec::with_capacity(d * runs as usize);
        for run in 0..runs {
            let out = channel_forward(&x, &cfg, &RngStream::new(99, run));
            a_bits.extend(out.matrix.row(0).iter().map(|v| *v as f64));
            b_bits.extend(out.matrix.row(1).iter().map(|v| *v as f64));
        }
        let n = a_bits.len() as f64;
        let ma = a_bits.iter().sum::<f64>() / n;
        let mb = b_bits.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (a, b) in a_bits.iter().zip(&b_bits) {
            cov += (a - ma) * (b - mb);
            va += (a - ma) * (a - ma);
            vb += (b - mb) * (b - mb);
        }
        let corr = cov / (va.sqrt() * vb.sqrt());
        assert!(corr.abs() <= 0.02, "corr {corr}");
    }

    #[test]
    fn awgn_with_zero_std_and_mean_is_bitwise_identity() {
        let x = Matrix::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.25, -0.125]).unwrap();
        let mut rng = RngStream::new(5, 0);
        let y = add_awgn(&x, &AwgnConfig::off(), &mut rng);
        assert_eq!(x, y);
    }

    #[test]
    fn awgn_mean_shift_without_noise() {
        let x = Matrix::<f64>::zeros(2, 2);
        let mut rng = RngStream::new(5, 0);
        let y = add_awgn(&x, &AwgnConfig::new(0.1, 0.0).unwrap(), &mut rng);
        assert!(y.data().iter().all(|v| *v == 0.1));
    }

    #[test]
    fn awgn_sample_moments_match_the_distribution() {
        let n = 1_000_000usize;
        let x = Matrix::<f64>::zeros(1000, 1000);
        let mut rng = RngStream::new(1234, 0);
        let y = add_awgn(&x, &AwgnConfig::new(0.0, 1.0).unwrap(), &mut rng);
        let mean = y.data().iter().sum::<f64>() / n as f64;
        let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() <= 0.004, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() <= 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(ChannelConfig::random_erasure(1.5, false).is_err());
        assert!(ChannelConfig::magnitude_threshold(-0.1, false, true).is_err());
        assert!(AwgnConfig::new(0.0, -1.0).is_err());
    }

    #[test]
    fn masked_multiply_backprop_passes_kept_coordinates_only() {
        use crate::num::tape::Tape;
        let cfg = ChannelConfig::random_erasure(0.5, false).unwrap();
        let mut rng = RngStream::new(3, 1);
        let xs = [0.5f64, -1.0, 2.0, 0.25, -0.75, 1.5];
        let mask = cfg.mask_for_row(&xs, &mut rng);
        let mask_row =
            Matrix::from_vec(1, 6, mask.bits().iter().map(|b| *b as f64).collect()).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Matrix::from_vec(1, 6, xs.to_vec()).unwrap());
        let masked = tape.mul_const(x, mask_row.clone()).unwrap();
        let loss = tape.sum(masked);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), mask_row.data());
    }
}
