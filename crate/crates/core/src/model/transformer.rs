//! From-scratch encoder–decoder transformer, one sequence at a time.
//!
//! Sequences are processed at their true lengths (no PAD tokens ever enter a
//! forward pass), so no padding masks are needed; the decoder applies an
//! additive causal mask. The erasure channel sits between the encoder output
//! and the decoder's cross-attention, with one independent mask per position,
//! and optional Gaussian noise perturbs the input embeddings in training
//! mode.
//!
//! Parameters are reference-counted so that many per-sequence tapes can share
//! one set of weights without copying; the optimizer mutates them in place
//! between steps via `Arc::make_mut`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::channel::{AwgnConfig, ChannelConfig};
use crate::error::CoreError;
use crate::num::linalg::Matrix;
use crate::num::real::Real;
use crate::num::rng::RngStream;
use crate::num::tape::{Gradients, Tape, VarId};

/// Toy-scale architecture description.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Encoder and decoder layer counts (the same for both stacks).
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(CoreError::InvalidParam {
                name: "d_model",
                reason: format!("{} not divisible by {} heads", self.d_model, self.n_heads),
            });
        }
        if self.n_layers == 0 || self.d_ffn == 0 || self.max_len < 3 {
            return Err(CoreError::InvalidParam {
                name: "model config",
                reason: "layers, ffn width, and max_len must be positive".into(),
            });
        }
        if self.src_vocab < 4 || self.tgt_vocab < 4 {
            return Err(CoreError::InvalidParam {
                name: "vocab",
                reason: "vocabulary must include the reserved tokens".into(),
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Desk-scale defaults; vocabulary sizes come from the corpus.
    pub fn desk_scale(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 512,
            max_len: 50,
            src_vocab,
            tgt_vocab,
        }
    }
}

type P<T> = Arc<Matrix<T>>;

#[derive(Clone, Debug)]
pub struct AttentionParams<T: Real> {
    /// Per-head projections, each `d_model x head_dim`.
    pub wq: Vec<P<T>>,
    pub wk: Vec<P<T>>,
    pub wv: Vec<P<T>>,
    /// Per-head output projections, each `head_dim x d_model`; summing them
    /// implements the usual concat-then-project.
    pub wo: Vec<P<T>>,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams<T: Real> {
    pub gain: P<T>,
    pub bias: P<T>,
}

#[derive(Clone, Debug)]
pub struct FfnParams<T: Real> {
    pub w1: P<T>,
    pub b1: P<T>,
    pub w2: P<T>,
    pub b2: P<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer<T: Real> {
    pub attn: AttentionParams<T>,
    pub ln1: LayerNormParams<T>,
    pub ffn: FfnParams<T>,
    pub ln2: LayerNormParams<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer<T: Real> {
    pub self_attn: AttentionParams<T>,
    pub ln1: LayerNormParams<T>,
    pub cross_attn: AttentionParams<T>,
    pub ln2: LayerNormParams<T>,
    pub ffn: FfnParams<T>,
    pub ln3: LayerNormParams<T>,
}

/// Every learnable tensor of the model, visitable in a stable order.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Real> {
    pub src_embed: P<T>,
    pub tgt_embed: P<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub out_w: P<T>,
    pub out_b: P<T>,
}

fn visit_attn<'a, T: Real>(
    prefix: &str,
    a: &'a AttentionParams<T>,
    f: &mut impl FnMut(String, &'a P<T>),
) {
    for (h, w) in a.wq.iter().enumerate() {
        f(format!("{prefix}.wq.{h}"), w);
    }
    for (h, w) in a.wk.iter().enumerate() {
        f(format!("{prefix}.wk.{h}"), w);
    }
    for (h, w) in a.wv.iter().enumerate() {
        f(format!("{prefix}.wv.{h}"), w);
    }
    for (h, w) in a.wo.iter().enumerate() {
        f(format!("{prefix}.wo.{h}"), w);
    }
}

fn visit_attn_mut<T: Real>(a: &mut AttentionParams<T>, f: &mut impl FnMut(&mut P<T>)) {
    for w in a
        .wq
        .iter_mut()
        .chain(a.wk.iter_mut())
        .chain(a.wv.iter_mut())
        .chain(a.wo.iter_mut())
    {
        f(w);
    }
}

impl<T: Real> ModelParams<T> {
    /// Visit `(name, tensor)` pairs in the canonical order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a P<T>)) {
        f("src_embed".into(), &self.src_embed);
        f("tgt_embed".into(), &self.tgt_embed);
        for (l, layer) in self.encoder.iter().enumerate() {
            visit_attn(&format!("enc.{l}.attn"), &layer.attn, f);
            f(format!("enc.{l}.ln1.gain"), &layer.ln1.gain);
            f(format!("enc.{l}.ln1.bias"), &layer.ln1.bias);
            f(format!("enc.{l}.ffn.w1"), &layer.ffn.w1);
            f(format!("enc.{l}.ffn.b1"), &layer.ffn.b1);
            f(format!("enc.{l}.ffn.w2"), &layer.ffn.w2);
            f(format!("enc.{l}.ffn.b2"), &layer.ffn.b2);
            f(format!("enc.{l}.ln2.gain"), &layer.ln2.gain);
            f(format!("enc.{l}.ln2.bias"), &layer.ln2.bias);
        }
        for (l, layer) in self.decoder.iter().enumerate() {
            visit_attn(&format!("dec.{l}.self"), &layer.self_attn, f);
            f(format!("dec.{l}.ln1.gain"), &layer.ln1.gain);
            f(format!("dec.{l}.ln1.bias"), &layer.ln1.bias);
            visit_attn(&format!("dec.{l}.cross"), &layer.cross_attn, f);
            f(format!("dec.{l}.ln2.gain"), &layer.ln2.gain);
            f(format!("dec.{l}.ln2.bias"), &layer.ln2.bias);
            f(format!("dec.{l}.ffn.w1"), &layer.ffn.w1);
            f(format!("dec.{l}.ffn.b1"), &layer.ffn.b1);
            f(format!("dec.{l}.ffn.w2"), &layer.ffn.w2);
            f(format!("dec.{l}.ffn.b2"), &layer.ffn.b2);
            f(format!("dec.{l}.ln3.gain"), &layer.ln3.gain);
            f(format!("dec.{l}.ln3.bias"), &layer.ln3.bias);
        }
        f("out_w".into(), &self.out_w);
        f("out_b".into(), &self.out_b);
    }

    /// Mutable visit in the same order as [`visit`](Self::visit).
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut P<T>)) {
        f(&mut self.src_embed);
        f(&mut self.tgt_embed);
        for layer in self.encoder.iter_mut() {
            visit_attn_mut(&mut layer.attn, f);
            f(&mut layer.ln1.gain);
            f(&mut layer.ln1.bias);
            f(&mut layer.ffn.w1);
            f(&mut layer.ffn.b1);
            f(&mut layer.ffn.w2);
            f(&mut layer.ffn.b2);
            f(&mut layer.ln2.gain);
            f(&mut layer.ln2.bias);
        }
        for layer in self.decoder.iter_mut() {
            visit_attn_mut(&mut layer.self_attn, f);
            f(&mut layer.ln1.gain);
            f(&mut layer.ln1.bias);
            visit_attn_mut(&mut layer.cross_attn, f);
            f(&mut layer.ln2.gain);
            f(&mut layer.ln2.bias);
            f(&mut layer.ffn.w1);
            f(&mut layer.ffn.b1);
            f(&mut layer.ffn.w2);
            f(&mut layer.ffn.b2);
            f(&mut layer.ln3.gain);
            f(&mut layer.ln3.bias);
        }
        f(&mut self.out_w);
        f(&mut self.out_b);
    }

    pub fn named_tensors(&self) -> Vec<(String, P<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t.clone())));
        out
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }
}

fn xavier<T: Real>(rows: usize, cols: usize, rng: &mut RngStream) -> P<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64((rng.next_f64() * 2.0 - 1.0) * limit))
        .collect();
    Arc::new(Matrix::from_vec(rows, cols, data).expect("xavier init is finite"))
}

fn embed_init<T: Real>(rows: usize, cols: usize, rng: &mut RngStream) -> P<T> {
    // unit-scale entries after the sqrt(d_model) lookup scaling
    let std = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.next_gaussian() * std))
        .collect();
    Arc::new(Matrix::from_vec(rows, cols, data).expect("embedding init is finite"))
}

fn ones<T: Real>(cols: usize) -> P<T> {
    Arc::new(Matrix::from_vec(1, cols, vec![T::ONE; cols]).expect("ones"))
}

fn zeros<T: Real>(rows: usize, cols: usize) -> P<T> {
    Arc::new(Matrix::zeros(rows, cols))
}

fn init_attention<T: Real>(cfg: &ModelConfig, rng: &mut RngStream) -> AttentionParams<T> {
    let dk = cfg.head_dim();
    AttentionParams {
        wq: (0..cfg.n_heads)
            .map(|h| xavier(cfg.d_model, dk, &mut rng.substream(4 * h as u64)))
            .collect(),
        wk: (0..cfg.n_heads)
            .map(|h| xavier(cfg.d_model, dk, &mut rng.substream(4 * h as u64 + 1)))
            .collect(),
        wv: (0..cfg.n_heads)
            .map(|h| xavier(cfg.d_model, dk, &mut rng.substream(4 * h as u64 + 2)))
            .collect(),
        wo: (0..cfg.n_heads)
            .map(|h| xavier(dk, cfg.d_model, &mut rng.substream(4 * h as u64 + 3)))
            .collect(),
    }
}

fn init_ffn<T: Real>(cfg: &ModelConfig, rng: &mut RngStream) -> FfnParams<T> {
    FfnParams {
        w1: xavier(cfg.d_model, cfg.d_ffn, &mut rng.substream(0)),
        b1: zeros(1, cfg.d_ffn),
        w2: xavier(cfg.d_ffn, cfg.d_model, &mut rng.substream(1)),
        b2: zeros(1, cfg.d_model),
    }
}

fn init_ln<T: Real>(cfg: &ModelConfig) -> LayerNormParams<T> {
    LayerNormParams {
        gain: ones(cfg.d_model),
        bias: zeros(1, cfg.d_model),
    }
}

/// Seeded parameter initialization: Xavier-uniform projections, unit-scale
/// embeddings, identity layer norms.
pub fn init_params<T: Real>(cfg: &ModelConfig, rng: &RngStream) -> ModelParams<T> {
    let mut idx = 0u64;
    let mut next = || {
        idx += 1;
        rng.substream(idx)
    };
    let src_embed = embed_init(cfg.src_vocab, cfg.d_model, &mut next());
    let tgt_embed = embed_init(cfg.tgt_vocab, cfg.d_model, &mut next());
    let encoder = (0..cfg.n_layers)
        .map(|_| EncoderLayer {
            attn: init_attention(cfg, &mut next()),
            ln1: init_ln(cfg),
            ffn: init_ffn(cfg, &mut next()),
            ln2: init_ln(cfg),
        })
        .collect();
    let decoder = (0..cfg.n_layers)
        .map(|_| DecoderLayer {
            self_attn: init_attention(cfg, &mut next()),
            ln1: init_ln(cfg),
            cross_attn: init_attention(cfg, &mut next()),
            ln2: init_ln(cfg),
            ffn: init_ffn(cfg, &mut next()),
            ln3: init_ln(cfg),
        })
        .collect();
    ModelParams {
        src_embed,
        tgt_embed,
        encoder,
        decoder,
        out_w: xavier(cfg.d_model, cfg.tgt_vocab, &mut next()),
        out_b: zeros(1, cfg.tgt_vocab),
    }
}

/// Sinusoidal positional encodings for positions `0..max_len`.
pub fn positional_encoding<T: Real>(max_len: usize, d_model: usize) -> Matrix<T> {
    let mut pe = Matrix::zeros(max_len, d_model);
    for pos in 0..max_len {
        for i in 0..d_model.div_ceil(2) {
            let rate = (pos as f64) / 10_000f64.powf(2.0 * i as f64 / d_model as f64);
            pe.set(pos, 2 * i, T::from_f64(rate.sin()));
            if 2 * i + 1 < d_model {
                pe.set(pos, 2 * i + 1, T::from_f64(rate.cos()));
            }
        }
    }
    pe
}

/// Additive causal mask: position `i` may attend to positions `<= i`.
pub fn causal_mask<T: Real>(len: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(len, len);
    let neg = T::from_f64(-1e9);
    for i in 0..len {
        for j in (i + 1)..len {
            m.set(i, j, neg);
        }
    }
    m
}

/// Scaled dot-product attention on the tape. Returns `(output, weights)`;
/// weight rows are a softmax and sum to one.
pub fn scaled_dot_attention<T: Real>(
    tape: &mut Tape<T>,
    q: VarId,
    k: VarId,
    v: VarId,
    mask: Option<&Matrix<T>>,
) -> Result<(VarId, VarId), CoreError> {
    let dk = tape.value(q).cols();
    let scores = tape.matmul_bt(q, k)?;
    let scaled = tape.scale(scores, T::from_f64(1.0 / (dk as f64).sqrt()));
    let masked = match mask {
        Some(m) => tape.add_const(scaled, m)?,
        None => scaled,
    };
    let weights = tape.softmax_rows(masked);
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Per-sequence noise sources; `None` fields disable the corresponding
/// perturbation.
pub struct NoiseContext {
    pub channel: Option<(ChannelConfig, RngStream)>,
    pub awgn: Option<(AwgnConfig, RngStream)>,
}

impl NoiseContext {
    pub fn silent() -> Self {
        NoiseContext {
            channel: None,
            awgn: None,
        }
    }
}

/// Cross-attention weights retained from one decode pass:
/// `(layer, head, tgt_len x src_len)`.
pub struct CollectedAttention<T: Real> {
    pub cross: Vec<(usize, usize, Matrix<T>)>,
}

impl<T: Real> CollectedAttention<T> {
    pub fn new() -> Self {
        CollectedAttention { cross: Vec::new() }
    }
}

impl<T: Real> Default for CollectedAttention<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Forward-pass driver for one parameter set on one tape.
///
/// Each parameter becomes a single shared leaf on the tape the first time it
/// is touched; `param_gradients` maps a backward pass onto the canonical
/// tensor order. Use one `Forward` per tape.
pub struct Forward<'p, T: Real> {
    pub cfg: &'p ModelConfig,
    pub params: &'p ModelParams<T>,
    pub pe: &'p Matrix<T>,
    leaves: RefCell<HashMap<usize, VarId>>,
}

/// Handles out of one training forward pass.
pub struct SequenceLoss {
    pub loss: VarId,
    pub logits: VarId,
    pub zero_rows: usize,
}

impl<'p, T: Real> Forward<'p, T> {
    pub fn new(cfg: &'p ModelConfig, params: &'p ModelParams<T>, pe: &'p Matrix<T>) -> Self {
        Forward {
            cfg,
            params,
            pe,
            leaves: RefCell::new(HashMap::new()),
        }
    }

    fn leaf(&self, tape: &mut Tape<T>, p: &P<T>) -> VarId {
        let key = Arc::as_ptr(p) as usize;
        if let Some(id) = self.leaves.borrow().get(&key) {
            return *id;
        }
        let id = tape.leaf_shared(p.clone());
        self.leaves.borrow_mut().insert(key, id);
        id
    }

    /// Gradients for every parameter in canonical order (zeros where no
    /// gradient flowed). Consumes the relevant slots of `grads`.
    pub fn param_gradients(&self, grads: &mut Gradients<T>) -> Vec<Matrix<T>> {
        let leaves = self.leaves.borrow();
        let mut out = Vec::new();
        self.params.visit(&mut |_, p| {
            let key = Arc::as_ptr(p) as usize;
            let g = leaves
                .get(&key)
                .and_then(|id| grads.take(*id))
                .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()));
            out.push(g);
        });
        out
    }

    fn embed(
        &self,
        tape: &mut Tape<T>,
        table: &P<T>,
        ids: &[u32],
        awgn: Option<(&AwgnConfig, &mut RngStream)>,
    ) -> Result<VarId, CoreError> {
        if ids.is_empty() {
            return Err(CoreError::Empty("token sequence"));
        }
        if ids.len() > self.cfg.max_len {
            return Err(CoreError::InvalidParam {
                name: "sequence",
                reason: format!("length {} over max_len {}", ids.len(), self.cfg.max_len),
            });
        }
        let table_id = self.leaf(tape, table);
        let emb = tape.embedding(table_id, ids)?;
        let scaled = tape.scale(emb, T::from_f64((self.cfg.d_model as f64).sqrt()));
        let mut pe_slice = Matrix::zeros(ids.len(), self.cfg.d_model);
        for r in 0..ids.len() {
            pe_slice.row_mut(r).copy_from_slice(self.pe.row(r));
        }
        let mut x = tape.add_const(scaled, &pe_slice)?;
        if let Some((cfg, rng)) = awgn {
            if !cfg.is_identity() {
                let mut noise = Matrix::zeros(ids.len(), self.cfg.d_model);
                for v in noise.data_mut() {
                    *v = T::from_f64(cfg.mean + cfg.std * rng.next_gaussian());
                }
                x = tape.add_const(x, &noise)?;
            }
        }
        Ok(x)
    }

    fn attention_block(
        &self,
        tape: &mut Tape<T>,
        attn: &AttentionParams<T>,
        q_in: VarId,
        kv_in: VarId,
        mask: Option<&Matrix<T>>,
        mut collect: Option<&mut Vec<(usize, Matrix<T>)>>,
    ) -> Result<VarId, CoreError> {
        let mut acc: Option<VarId> = None;
        for h in 0..self.cfg.n_heads {
            let wq = self.leaf(tape, &attn.wq[h]);
            let wk = self.leaf(tape, &attn.wk[h]);
            let wv = self.leaf(tape, &attn.wv[h]);
            let wo = self.leaf(tape, &attn.wo[h]);
            let q = tape.matmul(q_in, wq)?;
            let k = tape.matmul(kv_in, wk)?;
            let v = tape.matmul(kv_in, wv)?;
            let (head_out, weights) = scaled_dot_attention(tape, q, k, v, mask)?;
            if let Some(sink) = collect.as_deref_mut() {
                sink.push((h, tape.value(weights).clone()));
            }
            let projected = tape.matmul(head_out, wo)?;
            acc = Some(match acc {
                None => projected,
                Some(prev) => tape.add(prev, projected)?,
            });
        }
        Ok(acc.expect("at least one head"))
    }

    fn ffn(&self, tape: &mut Tape<T>, ffn: &FfnParams<T>, x: VarId) -> Result<VarId, CoreError> {
        let w1 = self.leaf(tape, &ffn.w1);
        let b1 = self.leaf(tape, &ffn.b1);
        let w2 = self.leaf(tape, &ffn.w2);
        let b2 = self.leaf(tape, &ffn.b2);
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.relu(h);
        let out = tape.matmul(h, w2)?;
        tape.add_bias(out, b2)
    }

    fn layer_norm(
        &self,
        tape: &mut Tape<T>,
        ln: &LayerNormParams<T>,
        x: VarId,
    ) -> Result<VarId, CoreError> {
        let gain = self.leaf(tape, &ln.gain);
        let bias = self.leaf(tape, &ln.bias);
        tape.layer_norm(x, gain, bias)
    }

    /// Embed and encode a source sequence (ids at true length, END included).
    /// Gaussian input noise, when given, applies right after the positional
    /// encoding.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        src_ids: &[u32],
        awgn: Option<(&AwgnConfig, &mut RngStream)>,
    ) -> Result<VarId, CoreError> {
        let mut x = self.embed(tape, &self.params.src_embed, src_ids, awgn)?;
        for layer in &self.params.encoder {
            let attended = self.attention_block(tape, &layer.attn, x, x, None, None)?;
            let res = tape.add(x, attended)?;
            x = self.layer_norm(tape, &layer.ln1, res)?;
            let ff = self.ffn(tape, &layer.ffn, x)?;
            let res = tape.add(x, ff)?;
            x = self.layer_norm(tape, &layer.ln2, res)?;
        }
        Ok(x)
    }

    /// Apply the interface channel to encoder output rows: one independent
    /// mask per position, optional renormalization. Fully-erased rows pass
    /// through as zeros and are counted, not resampled.
    pub fn interface_channel(
        &self,
        tape: &mut Tape<T>,
        enc_out: VarId,
        channel: Option<&(ChannelConfig, RngStream)>,
    ) -> Result<(VarId, usize), CoreError> {
        let Some((cfg, rng)) = channel else {
            return Ok((enc_out, 0));
        };
        let value = tape.value(enc_out);
        let (rows, cols) = (value.rows(), value.cols());
        let mut mask = Matrix::zeros(rows, cols);
        let mut zero_rows = 0usize;
        for r in 0..rows {
            let mut row_rng = rng.substream(r as u64);
            let bits = cfg.mask_for_row(value.row(r), &mut row_rng);
            if bits.is_all_zero() {
                zero_rows += 1;
            }
            let mrow = mask.row_mut(r);
            for (m, b) in mrow.iter_mut().zip(bits.bits()) {
                *m = if *b == 1 { T::ONE } else { T::ZERO };
            }
        }
        let masked = tape.mul_const(enc_out, mask)?;
        let out = if cfg.renormalize_after {
            tape.normalize_rows(masked)
        } else {
            masked
        };
        Ok((out, zero_rows))
    }

    /// Decode a target prefix against channelled encoder output, returning
    /// next-token logits for every prefix position.
    pub fn decode(
        &self,
        tape: &mut Tape<T>,
        channelled: VarId,
        prefix_ids: &[u32],
        mut collect: Option<&mut CollectedAttention<T>>,
    ) -> Result<VarId, CoreError> {
        let mut y = self.embed(tape, &self.params.tgt_embed, prefix_ids, None)?;
        let mask = causal_mask::<T>(prefix_ids.len());
        for (l, layer) in self.params.decoder.iter().enumerate() {
            let attended = self.attention_block(tape, &layer.self_attn, y, y, Some(&mask), None)?;
            let res = tape.add(y, attended)?;
            y = self.layer_norm(tape, &layer.ln1, res)?;

            let mut sink: Vec<(usize, Matrix<T>)> = Vec::new();
            let cross = self.attention_block(
                tape,
                &layer.cross_attn,
                y,
                channelled,
                None,
                collect.as_deref_mut().map(|_| &mut sink),
            )?;
            if let Some(c) = collect.as_deref_mut() {
                for (h, w) in sink {
                    c.cross.push((l, h, w));
                }
            }
            let res = tape.add(y, cross)?;
            y = self.layer_norm(tape, &layer.ln2, res)?;

            let ff = self.ffn(tape, &layer.ffn, y)?;
            let res = tape.add(y, ff)?;
            y = self.layer_norm(tape, &layer.ln3, res)?;
        }
        let out_w = self.leaf(tape, &self.params.out_w);
        let out_b = self.leaf(tape, &self.params.out_b);
        let logits = tape.matmul(y, out_w)?;
        tape.add_bias(logits, out_b)
    }

    /// Full pass: encode, channel, decode, mean cross-entropy over targets.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape<T>,
        src_ids: &[u32],
        dec_input: &[u32],
        targets: &[u32],
        noise: &mut NoiseContext,
    ) -> Result<SequenceLoss, CoreError> {
        let awgn = noise.awgn.as_mut().map(|(cfg, rng)| (&*cfg, rng));
        let enc = self.encode(tape, src_ids, awgn)?;
        let (channelled, zero_rows) = self.interface_channel(tape, enc, noise.channel.as_ref())?;
        let logits = self.decode(tape, channelled, dec_input, None)?;
        let active = vec![true; targets.len()];
        let loss = tape.cross_entropy_mean(logits, targets, &active)?;
        Ok(SequenceLoss {
            loss,
            logits,
            zero_rows,
        })
    }
}

/// A parameter set bundled with its config and positional table, in the
/// training precision.
#[derive(Clone)]
pub struct TransformerModel {
    pub cfg: ModelConfig,
    pub params: ModelParams<f32>,
    pe: Matrix<f32>,
}

impl TransformerModel {
    pub fn new(cfg: ModelConfig, params: ModelParams<f32>) -> Result<Self, CoreError> {
        cfg.validate()?;
        let pe = positional_encoding(cfg.max_len, cfg.d_model);
        Ok(TransformerModel { cfg, params, pe })
    }

    pub fn init(cfg: ModelConfig, rng: &RngStream) -> Result<Self, CoreError> {
        cfg.validate()?;
        let params = init_params::<f32>(&cfg, rng);
        Self::new(cfg, params)
    }

    pub fn forward(&self) -> Forward<'_, f32> {
        Forward::new(&self.cfg, &self.params, &self.pe)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ffn: 16,
            max_len: 12,
            src_vocab: 11,
            tgt_vocab: 13,
        }
    }

    fn randn(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix<f64> {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.next_gaussian()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_position_attention_returns_the_value_row() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Matrix::from_vec(1, 4, vec![0.3, -0.2, 0.9, 0.0]).unwrap());
        let k = tape.leaf(Matrix::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let v = tape.leaf(Matrix::from_vec(1, 4, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let (out, weights) = scaled_dot_attention(&mut tape, q, k, v, None).unwrap();
        assert_eq!(tape.value(weights).data(), &[1.0]);
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn identical_keys_share_attention_equally() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(Matrix::from_vec(1, 2, vec![0.4, -1.0]).unwrap());
        let k = tape.leaf(Matrix::from_vec(2, 2, vec![0.7, 0.1, 0.7, 0.1]).unwrap());
        let v = tape.leaf(Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let (_, weights) = scaled_dot_attention(&mut tape, q, k, v, None).unwrap();
        let w = tape.value(weights);
        assert!((w.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((w.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let mut rng = RngStream::new(71, 0);
        let q = randn(3, 4, &mut rng);
        let k = randn(3, 4, &mut rng);
        let v = randn(3, 5, &mut rng);
        let mut tape = Tape::<f64>::new();
        let (qi, ki, vi) = (
            tape.leaf(q.clone()),
            tape.leaf(k.clone()),
            tape.leaf(v.clone()),
        );
        let (out, _) = scaled_dot_attention(&mut tape, qi, ki, vi, None).unwrap();
        let got = tape.value(out).clone();

        // independent dense recomputation
        let scale = 1.0 / 4f64.sqrt();
        for i in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|d| q.get(i, d) * k.get(j, d)).sum::<f64>() * scale)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..5 {
                let expect: f64 = (0..3).map(|j| exps[j] / z * v.get(j, c)).sum();
                assert!(
                    (got.get(i, c) - expect).abs() < 1e-10,
                    "({i},{c}): {} vs {expect}",
                    got.get(i, c)
                );
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = RngStream::new(72, 0);
        let q = randn(5, 6, &mut rng);
        let k = randn(7, 6, &mut rng);
        let v = randn(7, 6, &mut rng);
        let mut tape = Tape::<f64>::new();
        let (qi, ki, vi) = (tape.leaf(q), tape.leaf(k), tape.leaf(v));
        let (_, weights) = scaled_dot_attention(&mut tape, qi, ki, vi, None).unwrap();
        let w = tape.value(weights);
        for r in 0..w.rows() {
            let sum: f64 = w.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
            assert!(w.row(r).iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = RngStream::new(73, 0);
        let q = randn(3, 4, &mut rng);
        let k = randn(5, 4, &mut rng);
        let v = randn(5, 4, &mut rng);
        check_gradients(&[q, k, v], |tape, ids| {
            let (out, _) = scaled_dot_attention(tape, ids[0], ids[1], ids[2], None)?;
            Ok(tape.sum(out))
        })
        .unwrap();
    }

    fn forward_for<'a, T: Real>(
        cfg: &'a ModelConfig,
        params: &'a ModelParams<T>,
        pe: &'a Matrix<T>,
    ) -> Forward<'a, T> {
        Forward::new(cfg, params, pe)
    }

    #[test]
    fn encoder_output_shape_is_len_by_d_model() {
        let cfg = tiny_cfg();
        let params = init_params::<f64>(&cfg, &RngStream::new(74, 0));
        let pe = positional_encoding(cfg.max_len, cfg.d_model);
        let fwd = forward_for(&cfg, &params, &pe);
        let mut tape = Tape::new();
        let out = fwd.encode(&mut tape, &[4, 5, 6, 7, 8, 9, 2], None).unwrap();
        assert_eq!(tape.value(out).rows(), 7);
        assert_eq!(tape.value(out).cols(), cfg.d_model);
    }

    #[test]
    fn encode_rejects_overlength_and_oov() {
        let cfg = tiny_cfg();
        let params = init_params::<f64>(&cfg, &RngStream::new(75, 0));
        let pe = positional_encoding(cfg.max_len, cfg.d_model);
        let fwd = forward_for(&cfg, &params, &pe);
        let mut tape = Tape::new();
        let long: Vec<u32> = vec![4; cfg.max_len + 1];
        assert!(fwd.encode(&mut tape, &long, None).is_err());
        let mut tape = Tape::new();
        let fwd = forward_for(&cfg, &params, &pe);
        assert!(fwd.encode(&mut tape, &[999], None).is_err());
    }

    #[test]
    fn zero_std_awgn_equals_no_awgn_bitwise() {
        let cfg = tiny_cfg();
        let params = init_params::<f64>(&cfg, &RngStream::new(76, 0));
        let pe = positional_encoding(cfg.max_len, cfg.d_model);
        let ids = [4u32, 6, 2];
        let mut t1 = Tape::new();
        let fwd1 = forward_for(&cfg, &params, &pe);
        let a = fwd1.encode(&mut t1, &ids, None).unwrap();
        let mut t2 = Tape::new();
        let fwd2 = forward_for(&cfg, &params, &pe);
        let silent = AwgnConfig::off();
        let mut rng = RngStream::new(76, 1);
        let b = fwd2.encode(&mut t2, &ids, Some((&silent, &mut rng))).unwrap();
        assert_eq!(t1.value(a), t2.value(b));
    }

    #[test]
    fn decoder_is_causal() {
        let cfg = tiny_cfg();
        let params = init_params::<f64>(&cfg, &RngStream::new(77, 0));
        let pe = positional_encoding(cfg.max_len, cfg.d_model);
        let src = [4u32, 5, 2];
        let run = |prefix: &[u32]| {
            let fwd = forward_for(&cfg, &params, &pe);
            let mut tape = Tape::new();
            let enc = fwd.encode(&mut tape, &src, None).unwrap();
            let logits = fwd.decode(&mut tape, enc, prefix, None).unwrap();
            tape.value(logits).clone()
        };
        let a = run(&[1, 4, 5, 6]);
        let b = run(&[1, 4, 5, 9]); // change only the last token
        for t in 0..3 {
            for c in 0..a.cols() {
                assert_eq!(a.get(t, c), b.get(t, c), "position {t} leaked the future");
            }
        }
        assert_eq!(a.cols(), cfg.tgt_vocab);
    }

    #[test]
    fn identity_channel_is_a_bitwise_no_op() {
        let cfg = tiny_cfg();
        let params = init_params::<f64>(&cfg, &RngStream::new(78, 0));
        let pe = positional_encoding(cfg.max_len, cfg.d_model);
        let src = [4u32, 5, 6, 2];
        let channel = (
            ChannelConfig::random_erasure(1.0, false).unwrap(),
            RngStream::new(78, 1),
        );
        let fwd1 = forward_for(&cfg, &params, &pe);
        let mut t1 = Tape::new();
        let enc1 = fwd1.encode(&mut t1, &src, None).unwrap();
        let (ch1, zero_rows) = fwd1
            .interface_channel(&mut t1, enc1, Some(&channel))
            .unwrap();
        assert_eq!(zero_rows, 0);
        let l1 = fwd1.decode(&mut t1, ch1, &[1, 4], None).unwrap();

        let fwd2 = forward_for(&cfg, &params, &pe);
        let mut t2 = Tape::new();
        let enc2 = fwd2.encode(&mut t2, &src, None).unwrap();
        let (ch2, _) = fwd2.interface_channel(&mut t2, enc2, None).unwrap();
        let l2 = fwd2.decode(&mut t2, ch2, &[1, 4], None).unwrap();
        assert_eq!(t1.value(l1), t2.value(l2));
    }

    #[test]
    fn renormalizing_channel_yields_unit_source_rows() {
        let cfg = tiny_cfg();
        let params = init_params::<f64>(&cfg, &RngStream::new(79, 0));
        let pe = positional_encoding(cfg.max_len, cfg.d_model);
        let channel = (
            ChannelConfig::random_erasure(0.5, true).unwrap(),
            RngStream::new(79, 1),
        );
        let fwd = forward_for(&cfg, &params, &pe);
        let mut tape = Tape::new();
        let enc = fwd.encode(&mut tape, &[4, 5, 6, 7, 2], None).unwrap();
        let (ch, _) = fwd
            .interface_channel(&mut tape, enc, Some(&channel))
            .unwrap();
        let v = tape.value(ch);
        for r in 0..v.rows() {
            let norm: f64 = v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9 || norm == 0.0, "row {r}: {norm}");
        }
    }

    #[test]
    fn magnitude_threshold_erasure_fraction_tracks_the_gaussian_cdf() {
        // standard-normal activations, |x| < cutoff erased; the zero fraction
        // should match P(|Z| < cutoff) from quadrature of the normal density
        let cutoff = 0.8;
        let cfg = ChannelConfig::magnitude_threshold(cutoff, false, true).unwrap();
        let n = 200_000usize;
        let mut rng = RngStream::new(80, 0);
        let data: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
        let x = Matrix::from_vec(n / 100, 100, data).unwrap();
        let out = crate::channel::channel_forward(&x, &cfg, &RngStream::new(80, 1));
        let zeros = out.matrix.data().iter().filter(|v| **v == 0.0).count() as f64 / n as f64;

        // Simpson's rule for the standard normal density over [-cutoff, cutoff]
        let steps = 10_000;
        let h = 2.0 * cutoff / steps as f64;
        let pdf = |x: f64| (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut integral = pdf(-cutoff) + pdf(cutoff);
        for i in 1..steps {
            let x = -cutoff + i as f64 * h;
            integral += pdf(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        integral *= h / 3.0;

        assert!(
            (zeros - integral).abs() < 0.01,
            "erased fraction {zeros}, CDF mass {integral}"
        );
    }

    #[test]
    fn full_sequence_loss_gradients_match_finite_differences() {
        // every parameter of a tiny model against the central-difference
        // oracle, through the production forward path
        let cfg = ModelConfig {
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            d_ffn: 8,
            max_len: 8,
            src_vocab: 7,
            tgt_vocab: 9,
        };
        let params = init_params::<f64>(&cfg, &RngStream::new(81, 0));
        let pe = positional_encoding::<f64>(cfg.max_len, cfg.d_model);
        let src = [4u32, 5, 6, 2];
        let dec_input = [1u32, 4, 5];
        let targets = [4u32, 5, 2];

        let loss_of = |p: &ModelParams<f64>| -> f64 {
            let fwd = Forward::new(&cfg, p, &pe);
            let mut tape = Tape::new();
            let mut noise = NoiseContext::silent();
            let out = fwd
                .sequence_loss(&mut tape, &src, &dec_input, &targets, &mut noise)
                .unwrap();
            tape.value(out.loss).get(0, 0)
        };

        // analytic gradients once
        let fwd = Forward::new(&cfg, &params, &pe);
        let mut tape = Tape::new();
        let mut noise = NoiseContext::silent();
        let out = fwd
            .sequence_loss(&mut tape, &src, &dec_input, &targets, &mut noise)
            .unwrap();
        let mut grads = tape.backward(out.loss).unwrap();
        let analytic = fwd.param_gradients(&mut grads);

        let step = crate::gradcheck::FD_STEP;
        let mut tensor_idx = 0usize;
        let mut checked = 0usize;
        params.visit(&mut |name, tensor| {
            for entry in 0..tensor.data().len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                let mut i = 0usize;
                plus.visit_mut(&mut |slot| {
                    if i == tensor_idx {
                        Arc::make_mut(slot).data_mut()[entry] += step;
                    }
                    i += 1;
                });
                i = 0;
                minus.visit_mut(&mut |slot| {
                    if i == tensor_idx {
                        Arc::make_mut(slot).data_mut()[entry] -= step;
                    }
                    i += 1;
                });
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
                let a = analytic[tensor_idx].data()[entry];
                let denom = a.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    ((a - numeric) / denom).abs() <= crate::gradcheck::FD_REL_TOL,
                    "{name}[{entry}]: analytic {a}, numeric {numeric}"
                );
                checked += 1;
            }
            tensor_idx += 1;
        });
        // every parameter entry of the tiny model went through the oracle
        let mut total = 0usize;
        params.visit(&mut |_, t| total += t.data().len());
        assert_eq!(checked, total);
    }
}
