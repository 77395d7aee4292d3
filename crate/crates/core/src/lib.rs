//! Sketched structural regularization for continual learning.
//!
//! Structural regularizers such as EWC and MAS penalize movement away from a
//! previous task's weights through an importance matrix `Ω = WᵀW / n`. This
//! crate compresses `Ω` with a CountSketch of the gradient rows `W`, keeps an
//! online `√α`-weighted sketch across tasks, and provides the diagonal,
//! block-diagonal, low-rank and full baselines alongside a small MLP trainer
//! to compare them.

pub mod dump;
pub mod error;
pub mod harness;
pub mod hashing;
pub mod importance;
pub mod linalg;
pub mod nn;
pub mod regularizer;
pub mod sketch;
pub mod tasks;

pub use error::{Error, Result};
