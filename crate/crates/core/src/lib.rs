//! Coordinate-erasure robustness toolkit.
//!
//! Two halves share one numeric substrate:
//!
//! * geometry — effective sparsity, top-1 margins, concentration bounds for
//!   score deviation under Bernoulli coordinate masks, with Monte Carlo and
//!   exhaustive-enumeration checks (`margin`, `channel`);
//! * a from-scratch encoder–decoder transformer with a binary erasure
//!   channel at the encoder–decoder interface and optional Gaussian input
//!   noise, plus the corpus pipeline and metrics to train and evaluate it
//!   (`model`, `corpus`, `metrics`).

pub mod channel;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod margin;
pub mod metrics;
pub mod model;
pub mod num;

pub use channel::{AwgnConfig, ChannelConfig, ChannelMode, MaskVector};
pub use error::CoreError;
pub use margin::{GeometrySetup, MarginReport, McResult, TheoremParams};
pub use num::{Matrix, NormOrder, Real, RngStream, Tape, Vector};

/// Version stamp recorded in reports and manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
