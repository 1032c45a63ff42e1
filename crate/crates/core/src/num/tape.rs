//! Reverse-mode differentiation over a linear operation tape.
//!
//! Values are computed eagerly as ops are recorded; `backward` replays the
//! tape in reverse creation order (reverse topological order, each node
//! visited exactly once) and accumulates vector-Jacobian products.
//!
//! Constant-valued inputs (channel masks, positional encodings, additive
//! noise, attention masks) enter through `mul_const` / `add_const` and are
//! never differentiated: a mask multiplies gradients through unchanged, an
//! additive constant passes them through untouched.

use std::sync::Arc;

use crate::error::CoreError;
use crate::num::linalg::{matmul_a_bt_into, matmul_at_b_into, matmul_into, Matrix};
use crate::num::real::Real;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

enum Value<T: Real> {
    Owned(Matrix<T>),
    Shared(Arc<Matrix<T>>),
}

impl<T: Real> Value<T> {
    fn get(&self) -> &Matrix<T> {
        match self {
            Value::Owned(m) => m,
            Value::Shared(m) => m,
        }
    }
}

enum Op<T: Real> {
    Leaf,
    Add(VarId, VarId),
    /// `(rows x cols) + (1 x cols)` broadcast over rows.
    AddBias(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, T),
    /// `a + c` where `c` is not differentiated.
    AddConst(VarId),
    /// `a ⊙ c` where the mask `c` is not differentiated.
    MulConst(VarId, Matrix<T>),
    Matmul(VarId, VarId),
    /// `a @ b^T`.
    MatmulTransB(VarId, VarId),
    SoftmaxRows(VarId),
    Relu(VarId),
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
    },
    Embedding {
        table: VarId,
        ids: Vec<u32>,
    },
    /// Per-row L2 normalization; all-zero rows pass through unchanged.
    NormalizeRows(VarId),
    RowSlice {
        x: VarId,
        start: usize,
    },
    CrossEntropyMean {
        logits: VarId,
        targets: Vec<u32>,
        active: Vec<bool>,
    },
    Sum(VarId),
}

struct Node<T: Real> {
    op: Op<T>,
    value: Value<T>,
}

/// Gradients indexed by the `VarId`s of the tape that produced them.
pub struct Gradients<T: Real> {
    slots: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: VarId) -> Option<&Matrix<T>> {
        self.slots[id.0].as_ref()
    }

    pub fn take(&mut self, id: VarId) -> Option<Matrix<T>> {
        self.slots[id.0].take()
    }
}

/// Operation tape for one forward pass. Single-threaded by construction;
/// parallel work builds one tape per unit.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Matrix<T> {
        self.nodes[id.0].value.get()
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>) -> VarId {
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> VarId {
        self.push(Op::Leaf, value)
    }

    /// Leaf backed by shared storage; lets many tapes reference one set of
    /// parameters without copying them.
    pub fn leaf_shared(&mut self, value: Arc<Matrix<T>>) -> VarId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Value::Shared(value),
        });
        VarId(self.nodes.len() - 1)
    }

    fn same_shape(a: &Matrix<T>, b: &Matrix<T>) -> Result<(), CoreError> {
        if a.rows() != b.rows() || a.cols() != b.cols() {
            return Err(CoreError::ShapeMismatch {
                lrows: a.rows(),
                lcols: a.cols(),
                rrows: b.rows(),
                rcols: b.cols(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, CoreError> {
        let (va, vb) = (self.value(a), self.value(b));
        Self::same_shape(va, vb)?;
        let mut out = va.clone();
        for (o, x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += *x;
        }
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn add_bias(&mut self, a: VarId, bias: VarId) -> Result<VarId, CoreError> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(CoreError::ShapeMismatch {
                lrows: va.rows(),
                lcols: va.cols(),
                rrows: vb.rows(),
                rcols: vb.cols(),
            });
        }
        let mut out = va.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for j in 0..cols {
                row[j] += vb.data()[j];
            }
        }
        Ok(self.push(Op::AddBias(a, bias), out))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, CoreError> {
        let (va, vb) = (self.value(a), self.value(b));
        Self::same_shape(va, vb)?;
        let mut out = va.clone();
        for (o, x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o *= *x;
        }
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: VarId, c: T) -> VarId {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o *= c;
        }
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_const(&mut self, a: VarId, c: &Matrix<T>) -> Result<VarId, CoreError> {
        let va = self.value(a);
        Self::same_shape(va, c)?;
        let mut out = va.clone();
        for (o, x) in out.data_mut().iter_mut().zip(c.data()) {
            *o += *x;
        }
        Ok(self.push(Op::AddConst(a), out))
    }

    pub fn mul_const(&mut self, a: VarId, mask: Matrix<T>) -> Result<VarId, CoreError> {
        let va = self.value(a);
        Self::same_shape(va, &mask)?;
        let mut out = va.clone();
        for (o, x) in out.data_mut().iter_mut().zip(mask.data()) {
            *o *= *x;
        }
        Ok(self.push(Op::MulConst(a, mask), out))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, CoreError> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.matmul(vb)?;
        Ok(self.push(Op::Matmul(a, b), out))
    }

    /// `a @ b^T`; `a: m x k`, `b: n x k`.
    pub fn matmul_bt(&mut self, a: VarId, b: VarId) -> Result<VarId, CoreError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(CoreError::ShapeMismatch {
                lrows: va.rows(),
                lcols: va.cols(),
                rrows: vb.rows(),
                rcols: vb.cols(),
            });
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.rows());
        let mut out = Matrix::zeros(m, n);
        matmul_a_bt_into(va.data(), vb.data(), out.data_mut(), m, k, n);
        Ok(self.push(Op::MatmulTransB(a, b), out))
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let mut out = va.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mut max = row[0];
            for x in row.iter() {
                max = max.maximum(*x);
            }
            let mut sum = T::ZERO;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
            let _ = cols;
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let mut out = self.value(a).clone();
        for x in out.data_mut() {
            if *x < T::ZERO {
                *x = T::ZERO;
            }
        }
        self.push(Op::Relu(a), out)
    }

    /// Row-wise layer normalization with learnable gain and bias (both `1 x cols`).
    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId) -> Result<VarId, CoreError> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        if vg.rows() != 1 || vg.cols() != vx.cols() || vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(CoreError::ShapeMismatch {
                lrows: vx.rows(),
                lcols: vx.cols(),
                rrows: vg.rows(),
                rcols: vg.cols(),
            });
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let n = T::from_f64(vx.cols() as f64);
        let mut out = vx.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mut mean = T::ZERO;
            for x in row.iter() {
                mean += *x;
            }
            mean /= n;
            let mut var = T::ZERO;
            for x in row.iter() {
                let d = *x - mean;
                var += d * d;
            }
            var /= n;
            let sigma = (var + eps).sqrt();
            for (j, x) in row.iter_mut().enumerate() {
                *x = vg.data()[j] * ((*x - mean) / sigma) + vb.data()[j];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias }, out))
    }

    /// Rows of `table` gathered at `ids`.
    pub fn embedding(&mut self, table: VarId, ids: &[u32]) -> Result<VarId, CoreError> {
        let vt = self.value(table);
        for &id in ids {
            if id as usize >= vt.rows() {
                return Err(CoreError::InvalidParam {
                    name: "embedding id",
                    reason: format!("id {} out of vocabulary (size {})", id, vt.rows()),
                });
            }
        }
        let mut out = Matrix::zeros(ids.len(), vt.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(vt.row(id as usize));
        }
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            out,
        ))
    }

    /// L2-normalize each row; all-zero rows pass through as zeros.
    pub fn normalize_rows(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let mut out = va.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mut sq = T::ZERO;
            for x in row.iter() {
                sq += *x * *x;
            }
            let norm = sq.sqrt();
            if norm > T::ZERO {
                for x in row.iter_mut() {
                    *x /= norm;
                }
            }
        }
        self.push(Op::NormalizeRows(a), out)
    }

    pub fn row_slice(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId, CoreError> {
        let vx = self.value(x);
        if start + len > vx.rows() {
            return Err(CoreError::InvalidParam {
                name: "row_slice",
                reason: format!("rows {}..{} of {}", start, start + len, vx.rows()),
            });
        }
        let mut out = Matrix::zeros(len, vx.cols());
        for r in 0..len {
            out.row_mut(r).copy_from_slice(vx.row(start + r));
        }
        Ok(self.push(Op::RowSlice { x, start }, out))
    }

    /// Mean cross-entropy over rows with `active[r] == true`; targets index
    /// columns of `logits`. Uses a stable log-sum-exp. Output is `1 x 1`.
    pub fn cross_entropy_mean(
        &mut self,
        logits: VarId,
        targets: &[u32],
        active: &[bool],
    ) -> Result<VarId, CoreError> {
        let vl = self.value(logits);
        if targets.len() != vl.rows() || active.len() != vl.rows() {
            return Err(CoreError::DimMismatch {
                left: vl.rows(),
                right: targets.len(),
            });
        }
        let n_active = active.iter().filter(|a| **a).count();
        if n_active == 0 {
            return Err(CoreError::Empty("cross-entropy active rows"));
        }
        for (r, &t) in targets.iter().enumerate() {
            if active[r] && t as usize >= vl.cols() {
                return Err(CoreError::InvalidParam {
                    name: "cross-entropy target",
                    reason: format!("target {} out of range {}", t, vl.cols()),
                });
            }
        }
        let mut total = T::ZERO;
        for r in 0..vl.rows() {
            if !active[r] {
                continue;
            }
            let row = vl.row(r);
            total += row_logsumexp(row) - row[targets[r] as usize];
        }
        // non-finite losses are allowed through: the training loop detects
        // them and aborts with diagnostics
        let value = Matrix::from_vec_unchecked(1, 1, vec![total / T::from_f64(n_active as f64)]);
        Ok(self.push(
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
            },
            value,
        ))
    }

    pub fn sum(&mut self, a: VarId) -> VarId {
        let va = self.value(a);
        let mut total = T::ZERO;
        for x in va.data() {
            total += *x;
        }
        let value = Matrix::from_vec_unchecked(1, 1, vec![total]);
        self.push(Op::Sum(a), value)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: VarId) -> Result<Gradients<T>, CoreError> {
        let lv = self.value(loss);
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(CoreError::InvalidParam {
                name: "loss",
                reason: format!("expected 1x1 scalar, got {}x{}", lv.rows(), lv.cols()),
            });
        }
        let mut slots: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Matrix::from_vec(1, 1, vec![T::ONE]).expect("seed"));

        for idx in (0..self.nodes.len()).rev() {
            let g = match slots[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(idx, &g, &mut slots);
            // keep the gradient available for callers
            slots[idx] = Some(g);
        }
        Ok(Gradients { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Matrix<T>>], id: VarId, delta: Matrix<T>) {
        match &mut slots[id.0] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn grad_buf<'s>(
        &self,
        slots: &'s mut [Option<Matrix<T>>],
        id: VarId,
    ) -> &'s mut Matrix<T> {
        let v = self.value(id);
        let (rows, cols) = (v.rows(), v.cols());
        slots[id.0].get_or_insert_with(|| Matrix::zeros(rows, cols))
    }

    fn backward_op(&self, idx: usize, g: &Matrix<T>, slots: &mut [Option<Matrix<T>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(slots, *a, g.clone());
                self.accumulate(slots, *b, g.clone());
            }
            Op::AddBias(a, bias) => {
                self.accumulate(slots, *a, g.clone());
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (j, x) in g.row(r).iter().enumerate() {
                        db.data_mut()[j] += *x;
                    }
                }
                self.accumulate(slots, *bias, db);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                let mut da = g.clone();
                for (d, x) in da.data_mut().iter_mut().zip(vb.data()) {
                    *d *= *x;
                }
                self.accumulate(slots, *a, da);
                let mut db = g.clone();
                for (d, x) in db.data_mut().iter_mut().zip(va.data()) {
                    *d *= *x;
                }
                self.accumulate(slots, *b, db);
            }
            Op::Scale(a, c) => {
                let mut da = g.clone();
                for d in da.data_mut() {
                    *d *= *c;
                }
                self.accumulate(slots, *a, da);
            }
            Op::AddConst(a) => {
                self.accumulate(slots, *a, g.clone());
            }
            Op::MulConst(a, mask) => {
                let mut da = g.clone();
                for (d, m) in da.data_mut().iter_mut().zip(mask.data()) {
                    *d *= *m;
                }
                self.accumulate(slots, *a, da);
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                let (va_d, vb_d) = (va.data().to_vec(), vb.data().to_vec());
                {
                    let da = self.grad_buf(slots, *a);
                    matmul_a_bt_into(g.data(), &vb_d, da.data_mut(), m, n, k);
                }
                {
                    let db = self.grad_buf(slots, *b);
                    matmul_at_b_into(&va_d, g.data(), db.data_mut(), m, k, n);
                }
            }
            Op::MatmulTransB(a, b) => {
                // out = a @ b^T, a: m x k, b: n x k, g: m x n
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                let (va_d, vb_d) = (va.data().to_vec(), vb.data().to_vec());
                {
                    let da = self.grad_buf(slots, *a);
                    matmul_into(g.data(), &vb_d, da.data_mut(), m, n, k);
                }
                {
                    let db = self.grad_buf(slots, *b);
                    matmul_at_b_into(g.data(), &va_d, db.data_mut(), m, n, k);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = self.value_of(idx);
                let mut da = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mut inner = T::ZERO;
                    for (yv, gv) in yr.iter().zip(gr.iter()) {
                        inner += *yv * *gv;
                    }
                    let dr = da.row_mut(r);
                    for j in 0..dr.len() {
                        dr[j] = yr[j] * (gr[j] - inner);
                    }
                }
                self.accumulate(slots, *a, da);
            }
            Op::Relu(a) => {
                let vx = self.value(*a);
                let mut da = g.clone();
                for (d, x) in da.data_mut().iter_mut().zip(vx.data()) {
                    if *x <= T::ZERO {
                        *d = T::ZERO;
                    }
                }
                self.accumulate(slots, *a, da);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let eps = T::from_f64(LAYER_NORM_EPS);
                let n = T::from_f64(vx.cols() as f64);
                let cols = vx.cols();
                let mut dx = Matrix::zeros(vx.rows(), cols);
                let mut dgain = Matrix::zeros(1, cols);
                let mut dbias = Matrix::zeros(1, cols);
                for r in 0..vx.rows() {
                    let xr = vx.row(r);
                    let gr = g.row(r);
                    let mut mean = T::ZERO;
                    for v in xr {
                        mean += *v;
                    }
                    mean /= n;
                    let mut var = T::ZERO;
                    for v in xr {
                        let d = *v - mean;
                        var += d * d;
                    }
                    var /= n;
                    let sigma = (var + eps).sqrt();
                    // xhat, g*gain, and the two row means the VJP needs
                    let mut mean_gg = T::ZERO;
                    let mut mean_ggx = T::ZERO;
                    let mut xhat = vec![T::ZERO; cols];
                    let mut gg = vec![T::ZERO; cols];
                    for j in 0..cols {
                        xhat[j] = (xr[j] - mean) / sigma;
                        gg[j] = gr[j] * vg.data()[j];
                        mean_gg += gg[j];
                        mean_ggx += gg[j] * xhat[j];
                        dgain.data_mut()[j] += gr[j] * xhat[j];
                        dbias.data_mut()[j] += gr[j];
                    }
                    mean_gg /= n;
                    mean_ggx /= n;
                    let dr = dx.row_mut(r);
                    for j in 0..cols {
                        dr[j] = (gg[j] - mean_gg - xhat[j] * mean_ggx) / sigma;
                    }
                }
                self.accumulate(slots, *x, dx);
                self.accumulate(slots, *gain, dgain);
                self.accumulate(slots, *bias, dbias);
            }
            Op::Embedding { table, ids } => {
                let vt = self.value(*table);
                let (rows, cols) = (vt.rows(), vt.cols());
                let mut dt = Matrix::zeros(rows, cols);
                for (r, &id) in ids.iter().enumerate() {
                    let gr = g.row(r);
                    let tr = dt.row_mut(id as usize);
                    for j in 0..cols {
                        tr[j] += gr[j];
                    }
                }
                self.accumulate(slots, *table, dt);
            }
            Op::NormalizeRows(a) => {
                let vx = self.value(*a);
                let y = self.value_of(idx);
                let mut da = Matrix::zeros(vx.rows(), vx.cols());
                for r in 0..vx.rows() {
                    let xr = vx.row(r);
                    let mut sq = T::ZERO;
                    for v in xr {
                        sq += *v * *v;
                    }
                    let norm = sq.sqrt();
                    if norm == T::ZERO {
                        continue;
                    }
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mut gy = T::ZERO;
                    for (yv, gv) in yr.iter().zip(gr.iter()) {
                        gy += *yv * *gv;
                    }
                    let dr = da.row_mut(r);
                    for j in 0..dr.len() {
                        dr[j] = (gr[j] - yr[j] * gy) / norm;
                    }
                }
                self.accumulate(slots, *a, da);
            }
            Op::RowSlice { x, start } => {
                let vx = self.value(*x);
                let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                for r in 0..g.rows() {
                    dx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.accumulate(slots, *x, dx);
            }
            Op::CrossEntropyMean {
                logits,
                targets,
                active,
            } => {
                let vl = self.value(*logits);
                let scale = g.get(0, 0) / T::from_f64(active.iter().filter(|a| **a).count() as f64);
                let mut dl = Matrix::zeros(vl.rows(), vl.cols());
                for r in 0..vl.rows() {
                    if !active[r] {
                        continue;
                    }
                    let row = vl.row(r);
                    let lse = row_logsumexp(row);
                    let dr = dl.row_mut(r);
                    for j in 0..dr.len() {
                        let p = (row[j] - lse).exp();
                        dr[j] = p * scale;
                    }
                    dr[targets[r] as usize] -= scale;
                }
                self.accumulate(slots, *logits, dl);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                let gv = g.get(0, 0);
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for d in da.data_mut() {
                    *d = gv;
                }
                self.accumulate(slots, *a, da);
            }
        }
    }

    fn value_of(&self, idx: usize) -> &Matrix<T> {
        self.nodes[idx].value.get()
    }
}

fn row_logsumexp<T: Real>(row: &[T]) -> T {
    let mut max = row[0];
    for x in row {
        max = max.maximum(*x);
    }
    let mut sum = T::ZERO;
    for x in row {
        sum += (*x - max).exp();
    }
    max + sum.ln()
}
