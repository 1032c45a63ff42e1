//! Encoder–decoder transformer with an erasure channel at the
//! encoder–decoder interface, plus training, decoding, and checkpointing.

mod checkpoint;
mod train;
mod transformer;
mod translate;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use train::{lr_schedule, AdamState, EpochMetrics, TrainError, Trainer};
pub use transformer::{
    causal_mask, init_params, positional_encoding, scaled_dot_attention, CollectedAttention,
    Forward, ModelConfig, ModelParams, NoiseContext, SequenceLoss, TransformerModel,
};
pub use translate::{
    corpus_eval, eval_sentence_stream, evaluate_split, export_attention, greedy_translate,
    AttentionExport, Translation, ValMetrics,
};

use serde::{Deserialize, Serialize};

use crate::channel::{AwgnConfig, ChannelConfig};

/// Training hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub teacher_forcing_ratio: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Steps of warmup before the inverse-square-root decay takes over.
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 64,
            teacher_forcing_ratio: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            warmup_steps: 400,
            seed: 0,
        }
    }
}

/// Architecture plus the two noise processes attached to it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model: ModelConfig,
    /// Erasure channel between encoder and decoder; `None` disables the
    /// channel code path entirely.
    pub channel: Option<ChannelConfig>,
    /// Gaussian noise on input embeddings, applied in training mode only.
    pub awgn: AwgnConfig,
}
