//! Winner-competition layers and the per-task machinery behind them.
//!
//! A layer partitions its units into blocks; within a block, units compete
//! and only one survives at inference. Each task keeps its own winner
//! posterior (a softmax over per-block logits), trained with a
//! Gumbel-softmax relaxation while the shared weights are trained by
//! ordinary backprop through the relaxed gates.

pub mod conv;
pub mod dense;
pub mod sampling;

pub use conv::{ConvCache, ConvGrads, TwtaConvLayer};
pub use dense::{DenseCache, DenseGrads, TwtaDenseLayer};
pub use sampling::{
    discrete_winner_mask, sample_relaxed_winners, DiscreteMask, TaskLogits, WinnerSample,
};

use crate::error::{Error, Result};

/// Gradient-masking threshold: weight gradients whose winner share is below
/// this are dropped. Must lie in [0, 1); 0 disables masking.
pub(crate) fn check_eps_g(eps_g: f32) -> Result<()> {
    if !(0.0..1.0).contains(&eps_g) {
        return Err(Error::Param(format!(
            "eps_g must lie in [0, 1), got {eps_g}"
        )));
    }
    Ok(())
}
