use thiserror::Error;

/// Errors shared by the numeric, channel, and margin layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    #[error("shape mismatch: {lrows}x{lcols} vs {rrows}x{rcols}")]
    ShapeMismatch {
        lrows: usize,
        lcols: usize,
        rrows: usize,
        rcols: usize,
    },

    #[error("degenerate mask: all coordinates erased")]
    DegenerateMask,

    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },

    #[error("zero margin: theorem inapplicable")]
    ZeroMargin,

    #[error("dimension {d} too large for mask enumeration (max {max})")]
    EnumerationTooLarge { d: usize, max: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },
}
