//! Dual-branch prompt tuning for continual learning.
//!
//! A *stabilizer* (class-conditioned text prompts matched against image
//! features by cosine similarity, grown and frozen per task) and a *booster*
//! (one shared visual prompt plus a linear head, updated on every task) run
//! over frozen transformer encoders. Their logits are mixed by a learned
//! weight and rescaled by a per-class mask. The lite variant adds a
//! straight-through Gumbel-Softmax gate that decides per input whether the
//! booster runs at all.
//!
//! [`harness`] drives the full continual protocol: task streams, training,
//! evaluation, metrics, checkpoints and reports.

pub mod booster;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gate;
pub mod grad;
pub mod harness;
pub mod rehearsal;
pub mod rng;
pub mod stabilizer;
pub mod stream;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Param, Tensor};
