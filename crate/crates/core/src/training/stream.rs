//! Class-incremental task streams: an ordered sequence of tasks, each
//! introducing a disjoint set of global class indices with its own train and
//! test split.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A labelled example set. `inputs` is `[N, ...example shape]`; labels are
/// global class indices, one per row. Never empty.
#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.ndim() < 2 {
            return Err(Error::Spec(format!(
                "dataset inputs need a batch axis plus an example shape, got {:?}",
                inputs.shape()
            )));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: inputs.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        Ok(Dataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Copy the given rows into a fresh `[rows.len(), ...]` batch.
    pub fn gather(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let stride: usize = self.example_shape().iter().product();
        let mut data = Vec::with_capacity(rows.len() * stride);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.len() {
                return Err(Error::Contract(format!(
                    "row {r} outside dataset of {} examples",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.inputs.data()[r * stride..(r + 1) * stride]);
            labels.push(self.labels[r]);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(self.example_shape());
        Ok((Tensor::from_vec(shape, data)?, labels))
    }
}

/// One task: the classes it introduces plus its train/test splits.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub id: usize,
    pub classes: BTreeSet<usize>,
    pub train: Dataset,
    pub test: Dataset,
}

/// Ordered tasks with disjoint class sets drawn from a fixed global range.
#[derive(Debug, Clone)]
pub struct TaskStream {
    tasks: Vec<TaskData>,
    total_classes: usize,
}

impl TaskStream {
    /// Validates the class-incremental contract: task ids equal their
    /// positions, class sets are nonempty and pairwise disjoint within
    /// `0..total_classes`, every label belongs to its task's class set, and
    /// all tasks share one example shape.
    pub fn new(tasks: Vec<TaskData>, total_classes: usize) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::EmptyData("task stream has no tasks".into()));
        }
        let example_shape = tasks[0].train.example_shape().to_vec();
        let mut claimed: BTreeSet<usize> = BTreeSet::new();
        for (pos, task) in tasks.iter().enumerate() {
            if task.id != pos {
                return Err(Error::Spec(format!(
                    "task at position {pos} carries id {}",
                    task.id
                )));
            }
            if task.classes.is_empty() {
                return Err(Error::Spec(format!("task {pos} introduces no classes")));
            }
            for &c in &task.classes {
                if c >= total_classes {
                    return Err(Error::Spec(format!(
                        "task {pos} claims class {c} outside 0..{total_classes}"
                    )));
                }
                if !claimed.insert(c) {
                    return Err(Error::Spec(format!(
                        "class {c} appears in more than one task (second: task {pos})"
                    )));
                }
            }
            for (split, data) in [("train", &task.train), ("test", &task.test)] {
                if data.example_shape() != example_shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        op: "task stream example shape",
                        left: data.example_shape().to_vec(),
                        right: example_shape.clone(),
                    });
                }
                if let Some(&bad) = data.labels().iter().find(|l| !task.classes.contains(l)) {
                    return Err(Error::Spec(format!(
                        "task {pos} {split} split contains label {bad} outside its class set"
                    )));
                }
            }
        }
        Ok(TaskStream {
            tasks,
            total_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn total_classes(&self) -> usize {
        self.total_classes
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    pub fn task(&self, id: usize) -> Result<&TaskData> {
        self.tasks.get(id).ok_or(Error::UnknownTask(id))
    }

    pub fn example_shape(&self) -> &[usize] {
        self.tasks[0].train.example_shape()
    }

    /// Per-class flags marking everything introduced by tasks `0..=through`.
    pub fn seen_mask(&self, through: usize) -> Result<Vec<bool>> {
        if through >= self.tasks.len() {
            return Err(Error::UnknownTask(through));
        }
        let mut seen = vec![false; self.total_classes];
        for task in &self.tasks[..=through] {
            for &c in &task.classes {
                seen[c] = true;
            }
        }
        Ok(seen)
    }

    /// Cumulative class count after each task (strictly increasing by
    /// construction).
    pub fn cumulative_classes(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.tasks.len());
        let mut total = 0;
        for task in &self.tasks {
            total += task.classes.len();
            out.push(total);
        }
        out
    }
}
