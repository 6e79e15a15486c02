//! Winner-mask overlap between tasks: how much of the per-block winner
//! structure two tasks share. Low overlap means tasks carved out mostly
//! distinct subnetworks.

use crate::error::{Error, Result};
use crate::network::Model;
use crate::twta::DiscreteMask;

fn check_same_architecture(a: &[DiscreteMask], b: &[DiscreteMask]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "mask stacks cover {} vs {} TWTA layers",
            a.len(),
            b.len()
        )));
    }
    for (idx, (ma, mb)) in a.iter().zip(b).enumerate() {
        if ma.blocks() != mb.blocks() {
            return Err(Error::Contract(format!(
                "TWTA layer {idx} has {} vs {} blocks",
                ma.blocks(),
                mb.blocks()
            )));
        }
    }
    if a.is_empty() {
        return Err(Error::Contract("no TWTA layers to compare".into()));
    }
    Ok(())
}

/// Percentage of blocks, pooled over all TWTA layers, whose winner index is
/// the same in both mask stacks. Symmetric in its arguments.
pub fn winner_overlap(a: &[DiscreteMask], b: &[DiscreteMask]) -> Result<f64> {
    check_same_architecture(a, b)?;
    let mut equal = 0usize;
    let mut total = 0usize;
    for (ma, mb) in a.iter().zip(b) {
        total += ma.blocks();
        equal += ma
            .winners()
            .iter()
            .zip(mb.winners())
            .filter(|(x, y)| x == y)
            .count();
    }
    Ok(100.0 * equal as f64 / total as f64)
}

/// Per-layer overlap percentages, in layer order.
pub fn winner_overlap_per_layer(a: &[DiscreteMask], b: &[DiscreteMask]) -> Result<Vec<f64>> {
    check_same_architecture(a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(ma, mb)| {
            let equal = ma
                .winners()
                .iter()
                .zip(mb.winners())
                .filter(|(x, y)| x == y)
                .count();
            100.0 * equal as f64 / ma.blocks() as f64
        })
        .collect())
}

/// Pooled overlap for each consecutive registered-task pair of a model,
/// as `(earlier, later, percent)` tuples in task order.
pub fn consecutive_task_overlaps(model: &Model) -> Result<Vec<(usize, usize, f64)>> {
    let tasks: Vec<usize> = model.tasks().collect();
    let mut out = Vec::new();
    for pair in tasks.windows(2) {
        let a = model.winner_masks(pair[0])?;
        let b = model.winner_masks(pair[1])?;
        out.push((pair[0], pair[1], winner_overlap(&a, &b)?));
    }
    Ok(out)
}
