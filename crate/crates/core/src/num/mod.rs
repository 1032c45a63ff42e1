//! Dense linear algebra, deterministic randomness, and reverse-mode
//! differentiation.

pub mod linalg;
pub mod real;
pub mod rng;
pub mod tape;

pub use linalg::{Matrix, NormOrder, Vector};
pub use real::Real;
pub use rng::RngStream;
pub use tape::{Gradients, Tape, VarId};
