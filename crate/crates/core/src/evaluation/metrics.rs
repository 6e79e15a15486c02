//! Accuracy bookkeeping for class-incremental runs: the lower-triangular
//! accuracy matrix, backward-transfer interference, and task-aware dataset
//! accuracy.

use crate::error::{Error, Result};
use crate::network::Model;
use crate::numerics::Tensor;

/// Lower-triangular record of the continual run: `get(k, t)` is the accuracy
/// on task `t`'s test set after training through task `k`, defined only for
/// `t <= k`. Rows are appended as tasks finish.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        AccuracyMatrix { rows: Vec::new() }
    }

    /// Build from complete rows; row `k` must hold `k + 1` entries in [0, 1].
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Append the accuracies measured after one more task: one entry per
    /// task trained so far, oldest first.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Contract(format!(
                "row {} must hold {} accuracies, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if let Some(&bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!(
                "accuracy {bad} outside [0, 1]"
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of completed tasks (rows).
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, k: usize, t: usize) -> Result<f64> {
        self.rows
            .get(k)
            .and_then(|row| row.get(t))
            .copied()
            .ok_or_else(|| {
                Error::Metric(format!("A[{k}][{t}] undefined (defined iff t <= k < n)"))
            })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Accuracies after the last task, one per task.
    pub fn final_row(&self) -> &[f64] {
        self.rows.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Each task's accuracy right after it was learnt.
    pub fn diagonal(&self) -> Vec<f64> {
        self.rows.iter().enumerate().map(|(k, row)| row[k]).collect()
    }

    /// Mean of the final row.
    pub fn average_final_accuracy(&self) -> Result<f64> {
        if self.rows.is_empty() {
            return Err(Error::Metric("accuracy matrix is empty".into()));
        }
        let row = self.final_row();
        Ok(row.iter().sum::<f64>() / row.len() as f64)
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// Backward-transfer interference in percentage points: the average drop
/// from each task's just-learnt accuracy to its end-of-run accuracy,
/// `(1/(n-1)) * sum_t (A[t][t] - A[n-1][t])` over `t < n-1`, scaled by 100.
/// Positive means forgetting; lower is better. Needs at least two tasks.
pub fn bti(matrix: &AccuracyMatrix) -> Result<f64> {
    let n = matrix.n();
    if n < 2 {
        return Err(Error::Metric(format!(
            "backward transfer needs at least 2 tasks, have {n}"
        )));
    }
    let last = matrix.final_row();
    let mut sum = 0.0;
    for t in 0..n - 1 {
        sum += matrix.get(t, t)? - last[t];
    }
    Ok(100.0 * sum / (n - 1) as f64)
}

/// Fraction of examples whose highest seen-class logit under `task`'s winner
/// masks picks the true label. Ties resolve to the lowest class index.
pub fn dataset_accuracy(
    model: &Model,
    task: usize,
    inputs: &Tensor,
    labels: &[usize],
    seen: &[bool],
) -> Result<f64> {
    if inputs.ndim() < 2 || inputs.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "dataset accuracy",
            left: inputs.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if seen.len() != model.total_classes() {
        return Err(Error::ShapeMismatch {
            op: "dataset accuracy seen mask",
            left: vec![seen.len()],
            right: vec![model.total_classes()],
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyData("accuracy over zero examples".into()));
    }
    if !seen.iter().any(|&s| s) {
        return Err(Error::Metric("no classes marked seen".into()));
    }
    let classes = model.total_classes();
    let stride: usize = inputs.shape()[1..].iter().product();
    let mut correct = 0usize;
    let chunk = 256usize;
    let mut start = 0;
    while start < labels.len() {
        let end = (start + chunk).min(labels.len());
        let mut shape = vec![end - start];
        shape.extend_from_slice(&inputs.shape()[1..]);
        let batch = Tensor::from_vec(
            shape,
            inputs.data()[start * stride..end * stride].to_vec(),
        )?;
        let logits = model.forward_eval_batch(&batch, task)?;
        for (row, &label) in labels[start..end].iter().enumerate() {
            let scores = &logits.data()[row * classes..(row + 1) * classes];
            let mut best = None::<usize>;
            for k in 0..classes {
                if !seen[k] {
                    continue;
                }
                if best.map_or(true, |b| scores[k] > scores[b]) {
                    best = Some(k);
                }
            }
            if best == Some(label) {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / labels.len() as f64)
}
