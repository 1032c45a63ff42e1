//! Teacher-forced training with Adam and the inverse-square-root schedule.
//!
//! Every random decision (shuffling, teacher-forcing coins, channel masks,
//! input noise) is drawn from a substream derived from
//! `(seed, purpose, epoch, batch, sequence)`, so a run is a pure function of
//! its seed: interrupting and resuming at an epoch boundary is bit-identical
//! to running straight through, and worker count never changes results.
//! Per-sequence gradients are computed in a fixed number of chunks and summed
//! in chunk order.

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{make_batches, Batch, CorpusError, Direction, SentencePair, Vocab};
use crate::error::CoreError;
use crate::model::transformer::{NoiseContext, TransformerModel};
use crate::model::{ModelSpec, TrainConfig};
use crate::num::linalg::Matrix;
use crate::num::rng::RngStream;
use crate::num::tape::Tape;

/// Substream purposes hanging off the run seed.
pub(crate) mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TEACHER: u64 = 3;
    pub const CHANNEL: u64 = 4;
    pub const AWGN: u64 = 5;
    pub const GEN: u64 = 6;
    pub const EVAL: u64 = 7;
}

/// Gradient accumulation chunks per batch; fixed so that results do not
/// depend on how many workers execute them.
const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(
        "loss became non-finite at epoch {epoch}, batch {batch}, step {step} (lr {lr:.3e})"
    )]
    NanLoss {
        epoch: usize,
        batch: usize,
        step: u64,
        lr: f64,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Inverse-square-root schedule with linear warmup: rises to a peak at
/// `step == warmup_steps`, then decays as `step^-1/2`.
pub fn lr_schedule(step: u64, d_model: usize, warmup_steps: usize) -> f64 {
    assert!(step >= 1, "schedule steps are 1-based");
    let s = step as f64;
    let w = warmup_steps.max(1) as f64;
    (d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5))
}

/// First-and-second-moment state, aligned with the canonical tensor order.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Matrix<f32>>,
    pub v: Vec<Matrix<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(model: &TransformerModel) -> Self {
        let mut m = Vec::new();
        model.params.visit(&mut |_, t| {
            m.push(Matrix::<f32>::zeros(t.rows(), t.cols()));
        });
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// Loss and token accuracy of one pass over the training set.
#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub loss: f64,
    pub accuracy: f64,
    /// Encoder rows fully erased by the channel during this epoch.
    pub zero_rows: u64,
}

struct ChunkOutcome {
    grads: Vec<Matrix<f32>>,
    loss_weighted: f64,
    correct: u64,
    zero_rows: u64,
}

/// Owns the model, optimizer state, and progress counters for one run.
pub struct Trainer {
    pub spec: ModelSpec,
    pub cfg: TrainConfig,
    pub model: TransformerModel,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub zero_rows_seen: u64,
}

impl Trainer {
    pub fn new(spec: ModelSpec, cfg: TrainConfig) -> Result<Self, TrainError> {
        let base = RngStream::new(cfg.seed, 0);
        let model = TransformerModel::init(spec.model, &base.substream(stream::INIT))?;
        let adam = AdamState::zeros_like(&model);
        Ok(Trainer {
            spec,
            cfg,
            model,
            adam,
            epochs_done: 0,
            zero_rows_seen: 0,
        })
    }

    fn base_rng(&self) -> RngStream {
        RngStream::new(self.cfg.seed, 0)
    }

    /// Shuffle, batch, and take one optimization pass over the pairs.
    pub fn run_epoch(
        &mut self,
        pairs: &[SentencePair],
        direction: Direction,
        src_vocab: &Vocab,
        tgt_vocab: &Vocab,
    ) -> Result<EpochMetrics, TrainError> {
        let epoch = self.epochs_done;
        let mut shuffle_rng = self
            .base_rng()
            .substream(stream::SHUFFLE)
            .substream(epoch as u64);
        let batches = make_batches(
            pairs,
            direction,
            src_vocab,
            tgt_vocab,
            self.cfg.batch_size,
            self.model.cfg.max_len,
            &mut shuffle_rng,
        )?;

        let mut loss_weighted = 0.0f64;
        let mut tokens = 0u64;
        let mut correct = 0u64;
        let mut zero_rows = 0u64;
        for (bi, batch) in batches.iter().enumerate() {
            let out = self.train_batch(epoch, bi, batch)?;
            loss_weighted += out.0;
            tokens += out.1;
            correct += out.2;
            zero_rows += out.3;
        }
        self.epochs_done += 1;
        self.zero_rows_seen += zero_rows;
        Ok(EpochMetrics {
            loss: loss_weighted / tokens as f64,
            accuracy: correct as f64 / tokens as f64,
            zero_rows,
        })
    }

    fn train_batch(
        &mut self,
        epoch: usize,
        bi: usize,
        batch: &Batch,
    ) -> Result<(f64, u64, u64, u64), TrainError> {
        let b = batch.size();
        let base = self.base_rng();
        let mut tf_rng = base
            .substream(stream::TEACHER)
            .substream(epoch as u64)
            .substream(bi as u64);
        let teacher_forced: Vec<bool> = (0..b)
            .map(|_| tf_rng.bernoulli(self.cfg.teacher_forcing_ratio))
            .collect();

        let total_tokens: u64 = batch.tgt_len.iter().map(|l| (*l - 1) as u64).sum();
        let chunk_size = b.div_ceil(GRAD_CHUNKS);
        let ranges: Vec<std::ops::Range<usize>> = (0..b)
            .step_by(chunk_size)
            .map(|start| start..(start + chunk_size).min(b))
            .collect();

        let outcomes: Vec<Result<ChunkOutcome, CoreError>> = ranges
            .par_iter()
            .map(|range| {
                self.run_chunk(epoch, bi, batch, range.clone(), &teacher_forced, total_tokens)
            })
            .collect();

        // fold in chunk order
        let mut grads: Vec<Matrix<f32>> = Vec::new();
        self.model.params.visit(&mut |_, t| {
            grads.push(Matrix::zeros(t.rows(), t.cols()));
        });
        let mut loss_weighted = 0.0f64;
        let mut correct = 0u64;
        let mut zero_rows = 0u64;
        for outcome in outcomes {
            let out = outcome?;
            for (acc, g) in grads.iter_mut().zip(&out.grads) {
                for (a, x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *x;
                }
            }
            loss_weighted += out.loss_weighted;
            correct += out.correct;
            zero_rows += out.zero_rows;
        }

        let batch_loss = loss_weighted / total_tokens as f64;
        let lr = lr_schedule(self.adam.step + 1, self.model.cfg.d_model, self.cfg.warmup_steps);
        if !batch_loss.is_finite() {
            return Err(TrainError::NanLoss {
                epoch,
                batch: bi,
                step: self.adam.step + 1,
                lr,
            });
        }
        self.apply_adam(&grads, lr);
        Ok((loss_weighted, total_tokens, correct, zero_rows))
    }

    fn run_chunk(
        &self,
        epoch: usize,
        bi: usize,
        batch: &Batch,
        range: std::ops::Range<usize>,
        teacher_forced: &[bool],
        total_tokens: u64,
    ) -> Result<ChunkOutcome, CoreError> {
        let base = self.base_rng();
        let mut grads: Vec<Matrix<f32>> = Vec::new();
        self.model.params.visit(&mut |_, t| {
            grads.push(Matrix::zeros(t.rows(), t.cols()));
        });
        let mut loss_weighted = 0.0f64;
        let mut correct = 0u64;
        let mut zero_rows = 0u64;

        for s in range {
            let src = &batch.src_ids[s][..batch.src_len[s]];
            let tgt = &batch.tgt_ids[s][..batch.tgt_len[s]];
            let targets = &tgt[1..];
            let n_tok = targets.len() as u64;

            let seq_stream = |purpose: u64| {
                base.substream(purpose)
                    .substream(epoch as u64)
                    .substream(bi as u64)
                    .substream(s as u64)
            };

            let dec_input: Vec<u32> = if teacher_forced[s] {
                tgt[..tgt.len() - 1].to_vec()
            } else {
                self.greedy_prefix(src, tgt.len() - 1, &seq_stream(stream::GEN))?
            };

            let fwd = self.model.forward();
            let mut tape = Tape::new();
            let mut noise = NoiseContext {
                channel: self
                    .spec
                    .channel
                    .map(|c| (c, seq_stream(stream::CHANNEL))),
                awgn: (!self.spec.awgn.is_identity())
                    .then(|| (self.spec.awgn, seq_stream(stream::AWGN))),
            };
            let out = fwd.sequence_loss(&mut tape, src, &dec_input, targets, &mut noise)?;
            let loss = tape.value(out.loss).get(0, 0) as f64;
            let logits = tape.value(out.logits);
            for (t, target) in targets.iter().enumerate() {
                if argmax_row(logits.row(t)) == *target as usize {
                    correct += 1;
                }
            }
            zero_rows += out.zero_rows as u64;

            let mut g = tape.backward(out.loss)?;
            let pgrads = fwd.param_gradients(&mut g);
            let weight = n_tok as f32 / total_tokens as f32;
            for (acc, pg) in grads.iter_mut().zip(&pgrads) {
                for (a, x) in acc.data_mut().iter_mut().zip(pg.data()) {
                    *a += *x * weight;
                }
            }
            loss_weighted += loss * n_tok as f64;
        }
        Ok(ChunkOutcome {
            grads,
            loss_weighted,
            correct,
            zero_rows,
        })
    }

    /// Generate the model's own greedy prefix for scheduled-sampling steps:
    /// `[START, y^_1 .. y^_{len-1}]`, using training-mode noise on dedicated
    /// substreams.
    fn greedy_prefix(
        &self,
        src: &[u32],
        len: usize,
        gen_rng: &RngStream,
    ) -> Result<Vec<u32>, CoreError> {
        let fwd = self.model.forward();
        let mut tape = Tape::new();
        let awgn_cfg = self.spec.awgn;
        let mut awgn_rng = gen_rng.substream(0);
        let awgn = (!awgn_cfg.is_identity()).then_some((&awgn_cfg, &mut awgn_rng));
        let enc = fwd.encode(&mut tape, src, awgn)?;
        let channel = self.spec.channel.map(|c| (c, gen_rng.substream(1)));
        let (channelled, _) = fwd.interface_channel(&mut tape, enc, channel.as_ref())?;

        let mut prefix = vec![crate::corpus::START_ID];
        while prefix.len() < len {
            let logits = fwd.decode(&mut tape, channelled, &prefix, None)?;
            let last = tape.value(logits).row(prefix.len() - 1).to_vec();
            prefix.push(argmax_row(&last) as u32);
        }
        Ok(prefix)
    }

    fn apply_adam(&mut self, grads: &[Matrix<f32>], lr: f64) {
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let b1 = self.cfg.adam_beta1;
        let b2 = self.cfg.adam_beta2;
        let bias1 = (1.0 - b1.powi(t)) as f32;
        let bias2 = (1.0 - b2.powi(t)) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        let eps = self.cfg.adam_eps as f32;
        let lr = lr as f32;

        let mut idx = 0usize;
        let adam = &mut self.adam;
        self.model.params.visit_mut(&mut |tensor| {
            let g = grads[idx].data();
            let m = adam.m[idx].data_mut();
            let v = adam.v[idx].data_mut();
            let theta = std::sync::Arc::make_mut(tensor).data_mut();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
    }
}

pub(crate) fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, x) in row.iter().enumerate().skip(1) {
        if *x > row[best] {
            best = i;
        }
    }
    best
}
