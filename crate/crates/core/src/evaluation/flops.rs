//! FLOPs accounting under an explicitly declared counting model.
//!
//! The model, also emitted verbatim in report headers:
//!
//! - One multiply-accumulate = 2 FLOPs; a bias add = 1 FLOP.
//! - Counts are per example.
//! - Eval mode counts only retained weights: a TWTA layer runs its winner
//!   unit (dense) or winner map (conv) per block, i.e. at `1/J` density.
//! - Train mode counts the fully dense forward (every competing unit runs
//!   under the relaxed sample) plus a backward priced at twice the forward,
//!   where the TWTA share of the backward runs at winner density `1/J`
//!   when gradient masking is on (`eps_g > 0`) and fully dense when it is
//!   off. The head's backward is twice its forward either way.
//! - Elementwise gating, max-pooling, flatten, softmax, and the loss are
//!   not counted; they are linear-time bookkeeping next to the
//!   multiply-accumulate work.

use crate::error::Result;
use crate::network::{LayerSpec, ModelSpec};

/// Which cost to count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlopsMode {
    /// Winner-pruned inference.
    Eval,
    /// Relaxed-sample training step; `eps_g` decides whether the TWTA
    /// backward runs masked (winner-density) or dense.
    Train { eps_g: f32 },
}

/// Human-readable statement of the counting model, for report headers.
pub const COUNTING_MODEL: &str = "FLOPs model: 1 MAC = 2 FLOPs, per example. \
Eval counts winner units only (1/J of each TWTA layer). Train counts the \
dense forward plus a backward at 2x the forward, with the TWTA backward at \
winner density when eps_g > 0. Pooling, gating, flatten, softmax and loss \
are uncounted.";

/// Per-layer FLOPs, one `(name, flops)` row per spec layer in order.
pub fn flops_breakdown(spec: &ModelSpec, mode: FlopsMode) -> Result<Vec<(String, u64)>> {
    let trace = spec.validate()?;
    let mut out = Vec::with_capacity(spec.layers.len());
    for (idx, (layer, shapes)) in spec.layers.iter().zip(&trace).enumerate() {
        let flops = match *layer {
            LayerSpec::TwtaDense {
                in_dim,
                blocks,
                units,
            } => {
                let winner_macs = (in_dim * blocks) as u64;
                let dense_macs = winner_macs * units as u64;
                count_twta(mode, winner_macs, dense_macs)
            }
            LayerSpec::TwtaConv {
                kernel_h,
                kernel_l,
                in_channels,
                kernels,
                maps,
            } => {
                let positions = (shapes.output[0] * shapes.output[1]) as u64;
                let winner_macs =
                    positions * (kernels * kernel_h * kernel_l * in_channels) as u64;
                let dense_macs = winner_macs * maps as u64;
                count_twta(mode, winner_macs, dense_macs)
            }
            LayerSpec::Head { classes } => {
                let features = shapes.input[0] as u64;
                let forward = 2 * features * classes as u64 + classes as u64;
                match mode {
                    FlopsMode::Eval => forward,
                    FlopsMode::Train { .. } => forward * 3,
                }
            }
            LayerSpec::MaxPool2 | LayerSpec::Flatten => 0,
        };
        out.push((format!("layer{idx} ({})", layer.name()), flops));
    }
    Ok(out)
}

fn count_twta(mode: FlopsMode, winner_macs: u64, dense_macs: u64) -> u64 {
    match mode {
        FlopsMode::Eval => 2 * winner_macs,
        FlopsMode::Train { eps_g } => {
            let backward_macs = if eps_g > 0.0 { winner_macs } else { dense_macs };
            2 * dense_macs + 2 * (2 * backward_macs)
        }
    }
}

/// Total FLOPs per example for the spec under the given mode.
pub fn flops_estimate(spec: &ModelSpec, mode: FlopsMode) -> Result<u64> {
    Ok(flops_breakdown(spec, mode)?.iter().map(|(_, f)| f).sum())
}
