//! Continual-learning engine built on winner-competition layers.
//!
//! Blocks of units compete for each task: training learns a per-task winner
//! posterior alongside the shared weights via a Gumbel-softmax relaxation,
//! and inference prunes every block down to its winner, so each task runs a
//! fixed `1/units` slice of the network. The crate covers the layers, the
//! network container, class-incremental training with replay, and the
//! evaluation/pruning toolkit around them.

pub mod error;
pub mod evaluation;
pub mod network;
pub mod numerics;
pub mod training;
pub mod twta;

pub use error::{Error, Result};
