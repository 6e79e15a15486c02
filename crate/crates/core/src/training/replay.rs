//! Tiny episodic memory: per-class ring buffers of raw training examples.
//!
//! After each task's cycle the buffer ingests that task's examples, keeping
//! the most recent `budget` per class. During later tasks, batches are
//! augmented with a uniform draw over everything stored. Budget 0 turns the
//! whole mechanism off.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

/// One stored example: the raw input (example shape, no batch axis), its
/// global class label, and the task it was learnt under.
#[derive(Debug, Clone)]
pub struct ReplayItem {
    pub input: Tensor,
    pub label: usize,
    pub origin_task: usize,
}

/// Per-class ring buffers with a shared capacity.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    budget: usize,
    rings: BTreeMap<usize, VecDeque<ReplayItem>>,
}

impl ReplayBuffer {
    pub fn new(budget: usize) -> Self {
        ReplayBuffer {
            budget,
            rings: BTreeMap::new(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Total examples currently stored, across classes.
    pub fn len(&self) -> usize {
        self.rings.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stored examples per class, for bookkeeping and audits.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.rings
            .iter()
            .filter(|(_, ring)| !ring.is_empty())
            .map(|(&class, ring)| (class, ring.len()))
            .collect()
    }

    /// Push every row of `inputs` into its class ring, evicting the oldest
    /// entries beyond the budget. Rows keep dataset order, so what survives
    /// is the tail of the task's data. No-op when the budget is 0.
    pub fn ingest(&mut self, inputs: &Tensor, labels: &[usize], origin_task: usize) -> Result<()> {
        if inputs.ndim() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "replay ingest",
                left: inputs.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if self.budget == 0 {
            return Ok(());
        }
        let example_shape = inputs.shape()[1..].to_vec();
        let stride: usize = example_shape.iter().product();
        for (row, &label) in labels.iter().enumerate() {
            let data = inputs.data()[row * stride..(row + 1) * stride].to_vec();
            let item = ReplayItem {
                input: Tensor::from_vec(example_shape.clone(), data)?,
                label,
                origin_task,
            };
            let ring = self.rings.entry(label).or_default();
            ring.push_back(item);
            if ring.len() > self.budget {
                ring.pop_front();
            }
        }
        Ok(())
    }

    /// Uniform draw without replacement of `min(count, len)` stored items.
    /// Order of the returned slice is the draw order (deterministic for a
    /// given stream state).
    pub fn sample(&self, count: usize, rng: &mut RngStream) -> Vec<&ReplayItem> {
        let mut pool: Vec<&ReplayItem> = self.rings.values().flatten().collect();
        let n = count.min(pool.len());
        for i in 0..n {
            let j = i + rng.index(pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(n);
        pool
    }
}
