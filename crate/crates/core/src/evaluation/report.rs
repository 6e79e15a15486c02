//! One-stop summary of a continual run: final accuracies, backward
//! transfer, winner-mask overlap between consecutive tasks, retained-weight
//! accounting, and per-example FLOPs — with CSV and plain-text renderings.

use crate::error::{Error, Result};
use crate::evaluation::flops::{flops_estimate, FlopsMode, COUNTING_MODEL};
use crate::evaluation::metrics::{bti, AccuracyMatrix};
use crate::evaluation::overlap::{winner_overlap, winner_overlap_per_layer};
use crate::network::{retained_params, Model, RetainedParams};

/// Winner agreement between one consecutive task pair.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapRow {
    pub earlier: usize,
    pub later: usize,
    /// Percent of blocks with the same winner, pooled across layers.
    pub pooled: f64,
    /// Same measure per TWTA layer, in stack order.
    pub per_layer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Mean of the final accuracy row, in [0, 1].
    pub average_final_accuracy: f64,
    /// Backward-transfer points; `None` for single-task runs where the
    /// measure is undefined.
    pub backward_transfer: Option<f64>,
    pub overlaps: Vec<OverlapRow>,
    /// Mean pooled overlap over consecutive pairs.
    pub average_overlap: Option<f64>,
    pub retained: RetainedParams,
    /// TWTA weights kept at inference as a fraction of all TWTA weights.
    pub retained_fraction: f64,
    pub flops_eval: u64,
    pub flops_train: u64,
    pub accuracy: AccuracyMatrix,
}

/// Assemble the report for a trained model and its evaluation matrix.
/// `eps_g` is the run's sparsification threshold (it decides the train-time
/// FLOPs accounting).
pub fn metrics_report(model: &Model, matrix: &AccuracyMatrix, eps_g: f32) -> Result<MetricsReport> {
    let tasks: Vec<usize> = model.tasks().collect();
    if tasks.len() != matrix.n() {
        return Err(Error::Contract(format!(
            "accuracy matrix covers {} tasks but the model has {} registered",
            matrix.n(),
            tasks.len()
        )));
    }
    if tasks.is_empty() {
        return Err(Error::EmptyData("report needs at least one trained task".into()));
    }
    let mut overlaps = Vec::new();
    for pair in tasks.windows(2) {
        let a = model.winner_masks(pair[0])?;
        let b = model.winner_masks(pair[1])?;
        overlaps.push(OverlapRow {
            earlier: pair[0],
            later: pair[1],
            pooled: winner_overlap(&a, &b)?,
            per_layer: winner_overlap_per_layer(&a, &b)?,
        });
    }
    let average_overlap = if overlaps.is_empty() {
        None
    } else {
        Some(overlaps.iter().map(|o| o.pooled).sum::<f64>() / overlaps.len() as f64)
    };
    let spec = model.spec();
    Ok(MetricsReport {
        average_final_accuracy: matrix.average_final_accuracy()?,
        backward_transfer: if matrix.n() >= 2 {
            Some(bti(matrix)?)
        } else {
            None
        },
        overlaps,
        average_overlap,
        retained: retained_params(spec)?,
        retained_fraction: crate::network::count_retained_fraction(spec)?,
        flops_eval: flops_estimate(spec, FlopsMode::Eval)?,
        flops_train: flops_estimate(spec, FlopsMode::Train { eps_g })?,
        accuracy: matrix.clone(),
    })
}

impl MetricsReport {
    /// `metric,value` rows. Accuracy-matrix entries appear as
    /// `accuracy_after_task{k}_on_task{t}`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!(
            "average_final_accuracy,{:.6}\n",
            self.average_final_accuracy
        ));
        if let Some(b) = self.backward_transfer {
            out.push_str(&format!("backward_transfer_points,{b:.6}\n"));
        }
        out.push_str(&format!(
            "retained_twta_fraction,{:.6}\n",
            self.retained_fraction
        ));
        out.push_str(&format!("twta_weights_total,{}\n", self.retained.twta_total));
        out.push_str(&format!(
            "twta_weights_retained,{}\n",
            self.retained.twta_retained
        ));
        out.push_str(&format!("head_weights,{}\n", self.retained.head));
        out.push_str(&format!("flops_eval_per_example,{}\n", self.flops_eval));
        out.push_str(&format!("flops_train_per_example,{}\n", self.flops_train));
        for o in &self.overlaps {
            out.push_str(&format!(
                "overlap_task{}_task{}_pct,{:.6}\n",
                o.earlier, o.later, o.pooled
            ));
        }
        if let Some(avg) = self.average_overlap {
            out.push_str(&format!("average_overlap_pct,{avg:.6}\n"));
        }
        for (k, row) in self.accuracy.rows().iter().enumerate() {
            for (t, acc) in row.iter().enumerate() {
                out.push_str(&format!("accuracy_after_task{k}_on_task{t},{acc:.6}\n"));
            }
        }
        out
    }

    /// Aligned plain-text rendering, ending with the FLOPs counting model
    /// so numbers are never quoted without their definition.
    pub fn to_text(&self) -> String {
        let mut lines = vec![format!(
            "continual run over {} task(s)",
            self.accuracy.n()
        )];
        lines.push(format!(
            "  average final accuracy : {:6.2}%",
            100.0 * self.average_final_accuracy
        ));
        match self.backward_transfer {
            Some(b) => lines.push(format!("  backward transfer      : {b:+6.2} points")),
            None => lines.push("  backward transfer      : n/a (single task)".into()),
        }
        lines.push(format!(
            "  retained TWTA weights  : {:6.2}% ({} of {})",
            100.0 * self.retained_fraction,
            self.retained.twta_retained,
            self.retained.twta_total
        ));
        lines.push(format!(
            "  eval FLOPs per example : {}",
            self.flops_eval
        ));
        lines.push(format!(
            "  train FLOPs per example: {}",
            self.flops_train
        ));
        for o in &self.overlaps {
            let layers = o
                .per_layer
                .iter()
                .map(|v| format!("{v:.1}"))
                .collect::<Vec<_>>()
                .join(", ");
            lines.push(format!(
                "  winner overlap {} -> {}  : {:6.2}% (per layer: {layers})",
                o.earlier, o.later, o.pooled
            ));
        }
        if let Some(avg) = self.average_overlap {
            lines.push(format!("  mean consecutive overlap: {avg:6.2}%"));
        }
        lines.push(String::new());
        lines.push(COUNTING_MODEL.to_string());
        lines.join("\n")
    }
}
