//! The class-incremental training loop: one full SGD cycle per task with
//! linearly annealed learning rate and temperature, joint cross-entropy over
//! the batch plus an optional replay draw, and per-batch gradient-sparsity
//! accounting.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::evaluation::metrics::{dataset_accuracy, AccuracyMatrix};
use crate::network::{GradientSet, Model};
use crate::numerics::{RngStream, StreamLabel, Tensor};
use crate::training::loss::{cross_entropy, mask_unseen};
use crate::training::replay::{ReplayBuffer, ReplayItem};
use crate::training::schedule::{lr_schedule, tau_schedule};
use crate::training::stream::{TaskData, TaskStream};
use crate::twta::check_eps_g;

/// Hyperparameters for one continual run. Defaults follow the reference
/// recipe: 100 epochs/task, batch 40, lr 0.1 annealed to 0, temperature
/// 0.67 annealed to 0.01, gradient mask threshold 1e-3, 10 replay slots per
/// class.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f32,
    pub tau0: f32,
    pub tau_end: f32,
    pub eps_g: f32,
    pub replay_budget: usize,
    pub seed: u64,
    /// Restrict the training cross-entropy to the current task's classes
    /// instead of everything seen so far. Incompatible with replay.
    pub task_local_ce: bool,
    /// Push replayed examples through a one-hot sample of the winner mask
    /// they were learnt under, rather than the current task's relaxed
    /// sample. Their origin-task posteriors stay frozen either way.
    pub replay_with_origin_masks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 40,
            lr0: 0.1,
            tau0: 0.67,
            tau_end: 0.01,
            eps_g: 1e-3,
            replay_budget: 10,
            seed: 0,
            task_local_ce: false,
            replay_with_origin_masks: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch size must be at least 1".into()));
        }
        for (name, v) in [
            ("lr0", self.lr0),
            ("tau0", self.tau0),
            ("tau_end", self.tau_end),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Param(format!("{name} must be positive, got {v}")));
            }
        }
        if self.tau_end > self.tau0 {
            return Err(Error::Param(format!(
                "tau_end {} exceeds tau0 {}",
                self.tau_end, self.tau0
            )));
        }
        check_eps_g(self.eps_g)?;
        if self.task_local_ce && self.replay_budget > 0 {
            return Err(Error::Param(
                "task-local cross-entropy cannot be combined with replay \
                 (replayed labels would fall outside the masked class set)"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// The three independent random streams one task cycle consumes: batch
/// shuffling, Gumbel noise, and replay draws. Keeping them separate means
/// toggling replay never perturbs the winner noise of a comparison run.
#[derive(Debug, Clone)]
pub struct CycleRng {
    pub shuffle: RngStream,
    pub gumbel: RngStream,
    pub replay: RngStream,
}

impl CycleRng {
    pub fn for_task(seed: u64, task: usize) -> Self {
        CycleRng {
            shuffle: RngStream::with_salt(seed, StreamLabel::Shuffle, task as u64),
            gumbel: RngStream::with_salt(seed, StreamLabel::Gumbel, task as u64),
            replay: RngStream::with_salt(seed, StreamLabel::Replay, task as u64),
        }
    }
}

/// One SGD update: `w <- w - lr * g` over every tensor the task trains.
/// The gradient set must cover exactly those tensors — a missing or extra
/// name is a contract error. Entries with gradient 0 leave their weight
/// bit-unchanged.
pub fn sgd_step(model: &mut Model, task: usize, grads: &GradientSet, lr: f32) -> Result<()> {
    let mut applied = 0usize;
    model.visit_trainable_mut(task, &mut |name, tensor| {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient supplied for {name}")))?;
        if g.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd step",
                left: tensor.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        for (w, &gv) in tensor.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * gv;
        }
        applied += 1;
        Ok(())
    })?;
    if applied != grads.len() {
        let names: Vec<&str> = grads.names().collect();
        return Err(Error::Contract(format!(
            "gradient set holds {} tensors but the task trains {applied}: {names:?}",
            grads.len()
        )));
    }
    Ok(())
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate at the epoch's first iteration.
    pub lr_start: f32,
    /// Temperature at the epoch's first iteration.
    pub tau_start: f32,
    /// Smallest per-batch fraction of exactly-zero weight-gradient entries.
    pub grad_sparsity_min: f64,
    /// Mean per-batch fraction of exactly-zero weight-gradient entries.
    pub grad_sparsity_mean: f64,
}

/// Temperature and realized gradient sparsity of a single batch; kept for
/// the final epoch so the low-τ tail can be audited batch by batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub tau: f32,
    pub grad_sparsity: f64,
}

/// What one task's cycle produced.
#[derive(Debug, Clone)]
pub struct TaskReport {
    pub task: usize,
    /// Loss of the very first batch, before any update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
    /// Per-batch temperature and gradient sparsity over the final epoch,
    /// in iteration order.
    pub final_epoch_batches: Vec<BatchStats>,
    /// Accuracy on the task's own train set after the cycle, evaluated
    /// under the task's discrete winner masks.
    pub final_train_accuracy: f64,
}

/// Hooks into the loop, called in training order. The continual driver uses
/// these for progress CSVs and checkpoints; all methods default to no-ops.
pub trait CycleObserver {
    fn on_epoch(&mut self, _task: usize, _stats: &EpochStats) -> Result<()> {
        Ok(())
    }
    fn on_task_trained(&mut self, _task: usize, _model: &Model, _report: &TaskReport) -> Result<()> {
        Ok(())
    }
    fn on_task_evaluated(&mut self, _task: usize, _accuracies: &[f64]) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoopObserver;

impl CycleObserver for NoopObserver {}

/// Fraction of weight/kernel gradient entries that are exactly zero —
/// the realized effect of posterior-driven gradient masking. Logits and
/// head gradients are deliberately excluded; a model with no TWTA weight
/// tensors reports 1 vacuously.
fn weight_grad_zero_fraction(grads: &GradientSet) -> f64 {
    let mut zeros = 0usize;
    let mut total = 0usize;
    for (name, g) in grads.iter() {
        if name.ends_with(".weights") || name.ends_with(".kernels") {
            total += g.data().len();
            zeros += g.data().iter().filter(|v| **v == 0.0).count();
        }
    }
    if total == 0 {
        1.0
    } else {
        zeros as f64 / total as f64
    }
}

/// Append replay rows to a batch, yielding the joint inputs and labels.
fn append_rows(
    inputs: &Tensor,
    labels: &[usize],
    items: &[&ReplayItem],
) -> Result<(Tensor, Vec<usize>)> {
    if items.is_empty() {
        return Ok((inputs.clone(), labels.to_vec()));
    }
    let example_shape = inputs.shape()[1..].to_vec();
    let mut data = inputs.data().to_vec();
    let mut out_labels = labels.to_vec();
    for item in items {
        if item.input.shape() != example_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "replay row",
                left: item.input.shape().to_vec(),
                right: example_shape,
            });
        }
        data.extend_from_slice(item.input.data());
        out_labels.push(item.label);
    }
    let mut shape = vec![out_labels.len()];
    shape.extend_from_slice(&example_shape);
    Ok((Tensor::from_vec(shape, data)?, out_labels))
}

/// Stack replay items alone into a batch.
fn stack_items(items: &[&ReplayItem]) -> Result<(Tensor, Vec<usize>)> {
    let example_shape = items[0].input.shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].input.data().len());
    let mut labels = Vec::with_capacity(items.len());
    for item in items {
        if item.input.shape() != example_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "replay batch",
                left: item.input.shape().to_vec(),
                right: example_shape,
            });
        }
        data.extend_from_slice(item.input.data());
        labels.push(item.label);
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(&example_shape);
    Ok((Tensor::from_vec(shape, data)?, labels))
}

fn scale_gradient(d: &mut Tensor, factor: f64) {
    for v in d.data_mut() {
        *v = (*v as f64 * factor) as f32;
    }
}

/// Elementwise-add a replay group's gradients into the accumulator,
/// dropping its logits entries (origin-task posteriors are frozen; under
/// one-hot samples those gradients are exactly zero anyway).
fn merge_shared(acc: &mut GradientSet, part: GradientSet) -> Result<()> {
    for (name, g) in part.iter() {
        if name.contains(".logits.") {
            continue;
        }
        let slot = acc.get_mut(name).ok_or_else(|| {
            Error::Contract(format!("replay gradient {name} has no accumulator slot"))
        })?;
        if slot.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "gradient merge",
                left: slot.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        for (a, &b) in slot.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }
    Ok(())
}

/// Forward + joint cross-entropy + backward for one batch, with the replay
/// draw either folded into the same relaxed forward (default) or pushed
/// through per-origin one-hot samples (`origin_masks`). Either way the loss
/// is the cross-entropy over all rows jointly and the returned gradients
/// cover exactly the current task's trainable tensors.
#[allow(clippy::too_many_arguments)]
fn batch_step(
    model: &Model,
    task: usize,
    inputs: &Tensor,
    labels: &[usize],
    replay_rows: &[&ReplayItem],
    ce_mask: &[bool],
    tau: f32,
    eps_g: f32,
    origin_masks: bool,
    gumbel_rng: &mut RngStream,
) -> Result<(f64, GradientSet)> {
    if !origin_masks || replay_rows.is_empty() {
        let (batch, batch_labels) = append_rows(inputs, labels, replay_rows)?;
        let (logits, cache) = model.forward_train(&batch, task, tau, gumbel_rng)?;
        let masked = mask_unseen(&logits, ce_mask)?;
        let (loss, d) = cross_entropy(&masked, &batch_labels)?;
        let grads = model.backward(&cache, &d, eps_g)?;
        return Ok((loss, grads));
    }

    let total = (labels.len() + replay_rows.len()) as f64;

    let (logits, cache) = model.forward_train(inputs, task, tau, gumbel_rng)?;
    let masked = mask_unseen(&logits, ce_mask)?;
    let (loss_cur, mut d) = cross_entropy(&masked, labels)?;
    let weight = labels.len() as f64 / total;
    scale_gradient(&mut d, weight);
    let mut grads = model.backward(&cache, &d, eps_g)?;
    let mut loss = loss_cur * weight;

    let mut groups: BTreeMap<usize, Vec<&ReplayItem>> = BTreeMap::new();
    for item in replay_rows {
        groups.entry(item.origin_task).or_default().push(item);
    }
    for (origin, items) in groups {
        let (batch, group_labels) = stack_items(&items)?;
        let samples = model.one_hot_samples(origin)?;
        let (logits, cache) = model.forward_train_with_samples(&batch, origin, &samples)?;
        let masked = mask_unseen(&logits, ce_mask)?;
        let (loss_g, mut d_g) = cross_entropy(&masked, &group_labels)?;
        let weight = items.len() as f64 / total;
        scale_gradient(&mut d_g, weight);
        let part = model.backward(&cache, &d_g, eps_g)?;
        merge_shared(&mut grads, part)?;
        loss += loss_g * weight;
    }
    Ok((loss, grads))
}

/// Run one task's full training cycle. `seen` flags every class introduced
/// by tasks up to and including this one; the cross-entropy masks the head
/// to that set (or to the task's own classes under `task_local_ce`). After
/// the cycle the replay buffer ingests the task's training examples.
pub fn run_task_cycle(
    model: &mut Model,
    task: &TaskData,
    seen: &[bool],
    config: &TrainConfig,
    replay: &mut ReplayBuffer,
    rng: &mut CycleRng,
    observer: &mut dyn CycleObserver,
) -> Result<TaskReport> {
    config.validate()?;
    if task.train.is_empty() {
        return Err(Error::EmptyData(format!("task {} has no training data", task.id)));
    }
    if seen.len() != model.total_classes() {
        return Err(Error::ShapeMismatch {
            op: "seen-class mask",
            left: vec![seen.len()],
            right: vec![model.total_classes()],
        });
    }
    if let Some(&c) = task.classes.iter().find(|&&c| !seen[c]) {
        return Err(Error::Contract(format!(
            "task {} class {c} is not flagged seen",
            task.id
        )));
    }
    let ce_mask: Vec<bool> = if config.task_local_ce {
        (0..seen.len()).map(|c| task.classes.contains(&c)).collect()
    } else {
        seen.to_vec()
    };

    let n = task.train.len();
    let batches_per_epoch = n.div_ceil(config.batch_size);
    let total_iterations = config.epochs * batches_per_epoch;
    let mut u = 0usize;
    let mut initial_loss = None;
    let mut epoch_reports = Vec::with_capacity(config.epochs);
    let mut final_epoch_batches = Vec::new();

    for epoch in 0..config.epochs {
        let order = rng.shuffle.permutation(n);
        let lr_start = lr_schedule(u, total_iterations, config.lr0);
        let tau_start = tau_schedule(u, total_iterations, config.tau0, config.tau_end);
        let mut loss_sum = 0.0f64;
        let mut sparsity_min = f64::INFINITY;
        let mut sparsity_sum = 0.0f64;
        let mut batches = 0usize;

        for chunk in order.chunks(config.batch_size) {
            let lr = lr_schedule(u, total_iterations, config.lr0);
            let tau = tau_schedule(u, total_iterations, config.tau0, config.tau_end);
            let (inputs, labels) = task.train.gather(chunk)?;
            let drawn = if config.replay_budget > 0 {
                replay.sample(chunk.len(), &mut rng.replay)
            } else {
                Vec::new()
            };
            let (loss, grads) = batch_step(
                model,
                task.id,
                &inputs,
                &labels,
                &drawn,
                &ce_mask,
                tau,
                config.eps_g,
                config.replay_with_origin_masks,
                &mut rng.gumbel,
            )?;
            if !loss.is_finite() {
                return Err(Error::Contract(format!(
                    "non-finite loss at task {} iteration {u}",
                    task.id
                )));
            }
            sgd_step(model, task.id, &grads, lr)?;
            initial_loss.get_or_insert(loss);
            let sparsity = weight_grad_zero_fraction(&grads);
            if epoch == config.epochs - 1 {
                final_epoch_batches.push(BatchStats {
                    tau,
                    grad_sparsity: sparsity,
                });
            }
            loss_sum += loss;
            sparsity_min = sparsity_min.min(sparsity);
            sparsity_sum += sparsity;
            batches += 1;
            u += 1;
        }

        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / batches as f64,
            lr_start,
            tau_start,
            grad_sparsity_min: sparsity_min,
            grad_sparsity_mean: sparsity_sum / batches as f64,
        };
        observer.on_epoch(task.id, &stats)?;
        epoch_reports.push(stats);
    }

    replay.ingest(task.train.inputs(), task.train.labels(), task.id)?;
    let final_train_accuracy = dataset_accuracy(
        model,
        task.id,
        task.train.inputs(),
        task.train.labels(),
        &ce_mask,
    )?;
    Ok(TaskReport {
        task: task.id,
        initial_loss: initial_loss.expect("at least one batch ran"),
        epochs: epoch_reports,
        final_epoch_batches,
        final_train_accuracy,
    })
}

/// Everything a continual run produces: the accuracy matrix and the
/// per-task training reports.
#[derive(Debug, Clone)]
pub struct ContinualOutcome {
    pub matrix: AccuracyMatrix,
    pub reports: Vec<TaskReport>,
}

/// Train the stream's tasks in order. For each task: register its winner
/// posteriors (seeded from `config.seed` and the task id), run the cycle,
/// then evaluate every task seen so far — each under its own winner masks,
/// with predictions over all classes seen so far — filling one matrix row.
/// The observer sees every epoch, trained task, and evaluation row as they
/// happen.
pub fn run_continual(
    model: &mut Model,
    stream: &TaskStream,
    config: &TrainConfig,
    observer: &mut dyn CycleObserver,
) -> Result<ContinualOutcome> {
    config.validate()?;
    if stream.example_shape() != model.spec().input_shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "stream example shape",
            left: stream.example_shape().to_vec(),
            right: model.spec().input_shape.clone(),
        });
    }
    if stream.total_classes() != model.total_classes() {
        return Err(Error::Contract(format!(
            "stream spans {} classes but the model head has {}",
            stream.total_classes(),
            model.total_classes()
        )));
    }
    let mut replay = ReplayBuffer::new(config.replay_budget);
    let mut matrix = AccuracyMatrix::new();
    let mut reports = Vec::with_capacity(stream.len());
    for task in stream.tasks() {
        let mut reg_rng =
            RngStream::with_salt(config.seed, StreamLabel::Init, 1 + task.id as u64);
        model.register_task(task.id, &mut reg_rng)?;
        let seen = stream.seen_mask(task.id)?;
        let mut rng = CycleRng::for_task(config.seed, task.id);
        let report = run_task_cycle(model, task, &seen, config, &mut replay, &mut rng, observer)?;
        observer.on_task_trained(task.id, model, &report)?;
        reports.push(report);

        let mut row = Vec::with_capacity(task.id + 1);
        for earlier in &stream.tasks()[..=task.id] {
            row.push(dataset_accuracy(
                model,
                earlier.id,
                earlier.test.inputs(),
                earlier.test.labels(),
                &seen,
            )?);
        }
        observer.on_task_evaluated(task.id, &row)?;
        matrix.push_row(row)?;
    }
    Ok(ContinualOutcome { matrix, reports })
}
