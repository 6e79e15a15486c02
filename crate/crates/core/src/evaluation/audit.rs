//! Structural sparsity audits: verify that task-aware inference really
//! zeroes every losing unit and that winner-based pruning retains exactly
//! one unit per block.
//!
//! The activation contract is block-structural: at every block instance
//! (per example, and per spatial position for conv maps), the `J - 1`
//! non-winning slots must be exactly zero. A winning slot that happens to
//! compute 0.0 (e.g. a conv winner over an all-zero patch) is counted and
//! reported as a degenerate winner but is not a structural violation —
//! on probe data with nonzero responses, observed zeros equal
//! `positions * blocks * (units - 1)` exactly.

use crate::error::{Error, Result};
use crate::network::{Layer, Model};
use crate::numerics::Tensor;
use crate::twta::DiscreteMask;

/// Activation findings for one TWTA layer over the whole probe set.
#[derive(Debug, Clone)]
pub struct LayerActivationAudit {
    pub layer: String,
    pub blocks: usize,
    pub units: usize,
    /// Block instances checked: examples (dense) or examples x positions
    /// (conv).
    pub positions: usize,
    /// `positions * blocks * (units - 1)` — the structural zero count.
    pub expected_zeros: usize,
    pub observed_zeros: usize,
    /// Winning slots that computed exactly 0.0.
    pub degenerate_winners: usize,
    pub violations: Vec<String>,
}

/// Weight-retention findings for one TWTA layer.
#[derive(Debug, Clone)]
pub struct RetentionAudit {
    pub layer: String,
    pub total: usize,
    pub retained: usize,
    pub units: usize,
}

impl RetentionAudit {
    pub fn fraction(&self) -> f64 {
        self.retained as f64 / self.total as f64
    }

    /// Exact check: one unit of `units` retained per block means
    /// `retained * units == total`.
    pub fn is_exact(&self) -> bool {
        self.retained * self.units == self.total
    }
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub activations: Vec<LayerActivationAudit>,
    pub retention: Vec<RetentionAudit>,
}

impl AuditReport {
    /// Every violation across both audit families, in layer order.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for layer in &self.activations {
            out.extend(layer.violations.iter().cloned());
        }
        for r in &self.retention {
            if !r.is_exact() {
                out.push(format!(
                    "{}: retained {} of {} weights, expected exactly 1/{}",
                    r.layer, r.retained, r.total, r.units
                ));
            }
        }
        out
    }

    pub fn pass(&self) -> bool {
        self.violations().is_empty()
    }

    /// Multi-line human-readable summary.
    pub fn summary(&self) -> String {
        let mut lines = Vec::new();
        for a in &self.activations {
            lines.push(format!(
                "{}: {} block instances, zeros {}/{} expected, {} degenerate winners, {} violations",
                a.layer,
                a.positions,
                a.observed_zeros,
                a.expected_zeros,
                a.degenerate_winners,
                a.violations.len()
            ));
        }
        for r in &self.retention {
            lines.push(format!(
                "{}: retained {}/{} weights ({:.4}%){}",
                r.layer,
                r.retained,
                r.total,
                100.0 * r.fraction(),
                if r.is_exact() { "" } else { " MISMATCH" }
            ));
        }
        lines.push(if self.pass() {
            "audit: PASS".into()
        } else {
            format!("audit: FAIL ({} violations)", self.violations().len())
        });
        lines.join("\n")
    }
}

/// Check one layer's eval activations against its winner mask. `acts` is
/// `[positions, blocks * units]` row-major (callers flatten conv maps'
/// spatial grid into `positions`). Reports a violation for every nonzero
/// non-winning slot, capped at 16 messages per layer.
pub fn audit_block_activations(
    layer: &str,
    acts: &Tensor,
    blocks: usize,
    units: usize,
    mask: &DiscreteMask,
) -> Result<LayerActivationAudit> {
    if acts.ndim() != 2 || acts.shape()[1] != blocks * units {
        return Err(Error::ShapeMismatch {
            op: "activation audit",
            left: acts.shape().to_vec(),
            right: vec![blocks * units],
        });
    }
    if mask.blocks() != blocks {
        return Err(Error::Contract(format!(
            "mask covers {} blocks, layer has {blocks}",
            mask.blocks()
        )));
    }
    let positions = acts.shape()[0];
    let width = blocks * units;
    let mut audit = LayerActivationAudit {
        layer: layer.to_string(),
        blocks,
        units,
        positions,
        expected_zeros: positions * blocks * (units - 1),
        observed_zeros: 0,
        degenerate_winners: 0,
        violations: Vec::new(),
    };
    for p in 0..positions {
        let row = &acts.data()[p * width..(p + 1) * width];
        for (i, &winner) in mask.winners().iter().enumerate() {
            for j in 0..units {
                let v = row[i * units + j];
                if v == 0.0 {
                    audit.observed_zeros += 1;
                    if j == winner {
                        audit.degenerate_winners += 1;
                    }
                } else if j != winner {
                    if audit.violations.len() < 16 {
                        audit.violations.push(format!(
                            "{layer}: position {p} block {i}: non-winning unit {j} \
                             is {v} (winner is unit {winner})"
                        ));
                    } else if audit.violations.len() == 16 {
                        audit.violations.push(format!("{layer}: further violations elided"));
                    }
                }
            }
        }
    }
    Ok(audit)
}

/// Run the full structural audit for a task: trace `probe` through
/// task-aware inference, check every TWTA layer's activations, and account
/// for the winner weights each layer retains.
pub fn sparsity_audit(model: &Model, task: usize, probe: &Tensor) -> Result<AuditReport> {
    if probe.ndim() < 2 {
        return Err(Error::ShapeMismatch {
            op: "audit probe",
            left: probe.shape().to_vec(),
            right: model.spec().input_shape.clone(),
        });
    }
    let examples = probe.shape()[0];
    if examples == 0 {
        return Err(Error::EmptyData("audit needs at least one probe example".into()));
    }
    let example_shape = probe.shape()[1..].to_vec();
    let stride: usize = example_shape.iter().product();
    let masks = model.winner_masks(task)?;

    // (trace index, name, blocks, units) per TWTA layer, plus retention.
    let mut twta = Vec::new();
    let mut retention = Vec::new();
    for (idx, layer) in model.layers().iter().enumerate() {
        match layer {
            Layer::Dense(l) => {
                twta.push((idx, format!("layer{idx} (twta_dense)"), l.blocks(), l.units()));
                retention.push(RetentionAudit {
                    layer: format!("layer{idx} (twta_dense)"),
                    total: l.weights().data().len(),
                    retained: l.in_dim() * l.blocks(),
                    units: l.units(),
                });
            }
            Layer::Conv(l) => {
                let (kh, kl) = l.kernel_dims();
                twta.push((
                    idx,
                    format!("layer{idx} (twta_conv)"),
                    l.kernel_count(),
                    l.maps(),
                ));
                retention.push(RetentionAudit {
                    layer: format!("layer{idx} (twta_conv)"),
                    total: l.kernels().data().len(),
                    retained: l.kernel_count() * kh * kl * l.in_channels(),
                    units: l.maps(),
                });
            }
            _ => {}
        }
    }

    let mut per_layer: Vec<Option<LayerActivationAudit>> = vec![None; twta.len()];
    for e in 0..examples {
        let input = Tensor::from_vec(
            example_shape.clone(),
            probe.data()[e * stride..(e + 1) * stride].to_vec(),
        )?;
        let (_, trace) = model.forward_eval_traced(&input, task)?;
        for (t, &(trace_idx, ref name, blocks, units)) in twta.iter().enumerate() {
            let act = &trace[trace_idx];
            // Dense: [blocks*units]; conv: [H, L, blocks*units]. Either way
            // the channel axis is last; fold everything before it into
            // positions.
            let width = blocks * units;
            let positions = act.data().len() / width;
            let flat = Tensor::from_vec(vec![positions, width], act.data().to_vec())?;
            let found =
                audit_block_activations(name, &flat, blocks, units, &masks[t])?;
            match &mut per_layer[t] {
                None => per_layer[t] = Some(found),
                Some(acc) => {
                    acc.positions += found.positions;
                    acc.expected_zeros += found.expected_zeros;
                    acc.observed_zeros += found.observed_zeros;
                    acc.degenerate_winners += found.degenerate_winners;
                    acc.violations.extend(found.violations);
                }
            }
        }
    }

    Ok(AuditReport {
        activations: per_layer.into_iter().flatten().collect(),
        retention,
    })
}
