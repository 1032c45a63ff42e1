//! Dense vectors and row-major matrices.
//!
//! Reductions run left-to-right with Neumaier compensation: the order is
//! pinned (no reassociation), and the compensation keeps norm/score sums
//! accurate enough for the tight geometry tolerances at large dimension.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::num::real::Real;

/// Which vector norm to take.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormOrder {
    L2,
    L4,
    Inf,
}

/// Compensated left-to-right sum of `a[i] * b[i]`.
#[inline]
pub(crate) fn dot_slices<T: Real>(a: &[T], b: &[T]) -> T {
    let mut sum = T::ZERO;
    let mut comp = T::ZERO;
    for (x, y) in a.iter().zip(b.iter()) {
        let term = *x * *y;
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn check_finite<T: Real>(data: &[T]) -> Result<(), CoreError> {
    for (i, x) in data.iter().enumerate() {
        if !x.is_finite() {
            return Err(CoreError::NonFinite { index: i });
        }
    }
    Ok(())
}

/// Fixed-dimension dense vector; 64-bit by default, 32-bit for model work.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vector<T: Real = f64> {
    data: Vec<T>,
}

impl<T: Real> Vector<T> {
    pub fn from_vec(data: Vec<T>) -> Result<Self, CoreError> {
        check_finite(&data)?;
        Ok(Vector { data })
    }

    pub fn from_slice(data: &[T]) -> Result<Self, CoreError> {
        Self::from_vec(data.to_vec())
    }

    pub fn zeros(d: usize) -> Self {
        Vector {
            data: vec![T::ZERO; d],
        }
    }

    /// One-hot basis vector `e_k` in dimension `d`.
    pub fn one_hot(d: usize, k: usize) -> Self {
        let mut v = Self::zeros(d);
        v.data[k] = T::ONE;
        v
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn dot(&self, other: &Self) -> Result<T, CoreError> {
        if self.len() != other.len() {
            return Err(CoreError::DimMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(dot_slices(&self.data, &other.data))
    }

    pub fn lp_norm(&self, order: NormOrder) -> T {
        match order {
            NormOrder::L2 => dot_slices(&self.data, &self.data).sqrt(),
            NormOrder::L4 => {
                let mut sum = T::ZERO;
                let mut comp = T::ZERO;
                for x in &self.data {
                    let sq = *x * *x;
                    let term = sq * sq;
                    let t = sum + term;
                    if sum.abs() >= term.abs() {
                        comp += (sum - t) + term;
                    } else {
                        comp += (term - t) + sum;
                    }
                    sum = t;
                }
                (sum + comp).sqrt().sqrt()
            }
            NormOrder::Inf => {
                let mut m = T::ZERO;
                for x in &self.data {
                    m = m.maximum(x.abs());
                }
                m
            }
        }
    }

    /// `self / ||self||_2`. Rejects the all-zero vector.
    pub fn normalized(&self) -> Result<Self, CoreError> {
        let norm = self.lp_norm(NormOrder::L2);
        if norm == T::ZERO {
            return Err(CoreError::DegenerateMask);
        }
        if norm == T::ONE {
            return Ok(self.clone());
        }
        Ok(Vector {
            data: self.data.iter().map(|x| *x / norm).collect(),
        })
    }

    pub fn scaled(&self, c: T) -> Self {
        Vector {
            data: self.data.iter().map(|x| *x * c).collect(),
        }
    }
}

impl<T: Real> std::ops::Index<usize> for Vector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i]
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T: Real = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, CoreError> {
        if data.len() != rows * cols {
            return Err(CoreError::InvalidParam {
                name: "matrix data",
                reason: format!("{} entries for {}x{}", data.len(), rows, cols),
            });
        }
        check_finite(&data)?;
        Ok(Matrix { rows, cols, data })
    }

    /// Construct without the finiteness check; for operation outputs whose
    /// non-finite values are detected by the caller's error contract.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vector<T>]) -> Result<Self, CoreError> {
        if rows.is_empty() {
            return Err(CoreError::Empty("matrix rows"));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(CoreError::DimMismatch {
                    left: cols,
                    right: r.len(),
                });
            }
            data.extend_from_slice(r.as_slice());
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::ONE;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, x: T) {
        self.data[i * self.cols + j] = x;
    }

    /// Standard product; the inner sum over `k` runs in ascending order so
    /// results are reproducible.
    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>, CoreError> {
        if self.cols != rhs.rows {
            return Err(CoreError::ShapeMismatch {
                lrows: self.rows,
                lcols: self.cols,
                rrows: rhs.rows,
                rcols: rhs.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        matmul_into(
            &self.data, &rhs.data, &mut out.data, self.rows, self.cols, rhs.cols,
        );
        Ok(out)
    }

    pub fn transposed(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }
}

/// `out += a @ b` with `a: m x k`, `b: k x n` (row-major, i-k-j order).
#[inline]
pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// `out += a^T @ b` with `a: m x k`, `b: m x n`, out: `k x n`.
#[inline]
pub(crate) fn matmul_at_b_into<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// `out += a @ b^T` with `a: m x k`, `b: n x k`, out: `m x n`.
#[inline]
pub(crate) fn matmul_a_bt_into<T: Real>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            orow[j] += dot_plain(arow, brow);
        }
    }
}

/// Plain (uncompensated) dot for the 32-bit training hot path.
#[inline]
fn dot_plain<T: Real>(a: &[T], b: &[T]) -> T {
    let mut sum = T::ZERO;
    for (x, y) in a.iter().zip(b.iter()) {
        sum += *x * *y;
    }
    sum
}
