//! Stochastic winner selection for blocks of competing units.
//!
//! Training draws a relaxed winner sample per block by pushing the block's
//! winner logits plus Gumbel noise through a tempered softmax; inference
//! takes the argmax winner and drops the rest.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{glorot_normal, gumbel_noise, RngStream, Tensor};

/// Relaxed winner sample for one layer: `xi_hat[i][j]` is unit j's share of
/// block i, each row on the simplex. Gumbels are kept so a perturbed replay
/// of the draw (gradient checking) sees the same noise.
#[derive(Debug, Clone)]
pub struct WinnerSample {
    xi_hat: Tensor,
    gumbels: Tensor,
    tau: f32,
}

impl WinnerSample {
    /// Deterministic part of the draw: softmax((logits + gumbels) / tau) per
    /// block row, computed in f64.
    pub fn from_parts(logits: &Tensor, gumbels: &Tensor, tau: f32) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Param(format!("tau must be positive, got {tau}")));
        }
        if !logits.same_shape(gumbels) || logits.ndim() != 2 {
            return Err(Error::ShapeMismatch {
                op: "winner_sample",
                left: logits.shape().to_vec(),
                right: gumbels.shape().to_vec(),
            });
        }
        let (blocks, units) = (logits.shape()[0], logits.shape()[1]);
        let mut xi = Tensor::zeros(vec![blocks, units]);
        let mut z = vec![0.0f64; units];
        for b in 0..blocks {
            for u in 0..units {
                z[u] = (logits.data()[b * units + u] as f64
                    + gumbels.data()[b * units + u] as f64)
                    / tau as f64;
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0f64;
            for u in 0..units {
                z[u] = (z[u] - max).exp();
                sum += z[u];
            }
            for u in 0..units {
                xi.data_mut()[b * units + u] = (z[u] / sum) as f32;
            }
        }
        Ok(Self {
            xi_hat: xi,
            gumbels: gumbels.clone(),
            tau,
        })
    }

    /// Degenerate sample that puts all mass on each block's masked winner.
    /// Forward passes through it reproduce the inference path exactly.
    pub fn one_hot(mask: &DiscreteMask, units: usize) -> Self {
        let blocks = mask.winners().len();
        let mut xi = Tensor::zeros(vec![blocks, units]);
        for (b, &w) in mask.winners().iter().enumerate() {
            xi.data_mut()[b * units + w] = 1.0;
        }
        Self {
            xi_hat: xi,
            gumbels: Tensor::zeros(vec![blocks, units]),
            tau: 1.0,
        }
    }

    pub fn xi_hat(&self) -> &Tensor {
        &self.xi_hat
    }

    pub fn gumbels(&self) -> &Tensor {
        &self.gumbels
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    pub fn blocks(&self) -> usize {
        self.xi_hat.shape()[0]
    }

    pub fn units(&self) -> usize {
        self.xi_hat.shape()[1]
    }
}

/// Draw a relaxed winner sample for every block of a layer.
pub fn sample_relaxed_winners(
    logits: &Tensor,
    tau: f32,
    rng: &mut RngStream,
) -> Result<WinnerSample> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Param(format!("tau must be positive, got {tau}")));
    }
    let gumbels = gumbel_noise(logits.shape().to_vec(), rng);
    WinnerSample::from_parts(logits, &gumbels, tau)
}

/// The hard winner per block at inference time: one unit survives, the rest
/// are pruned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteMask {
    winners: Vec<usize>,
}

impl DiscreteMask {
    pub fn new(winners: Vec<usize>) -> Self {
        Self { winners }
    }

    pub fn winners(&self) -> &[usize] {
        &self.winners
    }

    pub fn blocks(&self) -> usize {
        self.winners.len()
    }
}

/// Argmax winner per block. Softmax is monotone, so the argmax over raw
/// logits equals the argmax over the posterior probabilities. Ties break
/// toward the lowest index.
pub fn discrete_winner_mask(logits: &Tensor) -> DiscreteMask {
    let (blocks, units) = (logits.shape()[0], logits.shape()[1]);
    let mut winners = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let row = &logits.data()[b * units..(b + 1) * units];
        let mut best = 0usize;
        for (u, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = u;
            }
        }
        winners.push(best);
    }
    DiscreteMask::new(winners)
}

/// Backprop through the tempered softmax of one block row.
///
/// With s the relaxed sample and v[j] the loss gradient w.r.t. the row's
/// pre-mask contribution, d loss / d logit_j = s_j (v_j - sum_k s_k v_k) / tau.
pub(crate) fn logits_grad_row(s: &[f32], v: &[f64], tau: f32, out: &mut [f32]) {
    let mut inner = 0.0f64;
    for (sk, vk) in s.iter().zip(v) {
        inner += *sk as f64 * vk;
    }
    for j in 0..s.len() {
        out[j] = ((s[j] as f64) * (v[j] - inner) / tau as f64) as f32;
    }
}

/// Per-task winner logits shared by the dense and convolutional layers.
///
/// Each registered task owns an unconstrained `[blocks, units]` logit tensor;
/// the softmax over a row is that block's Categorical winner posterior.
#[derive(Debug, Clone)]
pub struct TaskLogits {
    blocks: usize,
    units: usize,
    by_task: BTreeMap<usize, Tensor>,
}

impl TaskLogits {
    pub fn new(blocks: usize, units: usize) -> Self {
        Self {
            blocks,
            units,
            by_task: BTreeMap::new(),
        }
    }

    /// Fresh Glorot-normal logits for a new task; fans are (units, units),
    /// giving std sqrt(1/units).
    pub fn register(&mut self, task: usize, rng: &mut RngStream) -> Result<()> {
        if self.by_task.contains_key(&task) {
            return Err(Error::TaskAlreadyRegistered(task));
        }
        let t = glorot_normal(vec![self.blocks, self.units], self.units, self.units, rng)?;
        self.by_task.insert(task, t);
        Ok(())
    }

    pub fn get(&self, task: usize) -> Result<&Tensor> {
        self.by_task.get(&task).ok_or(Error::UnknownTask(task))
    }

    pub fn get_mut(&mut self, task: usize) -> Result<&mut Tensor> {
        self.by_task.get_mut(&task).ok_or(Error::UnknownTask(task))
    }

    pub fn winner_mask(&self, task: usize) -> Result<DiscreteMask> {
        Ok(discrete_winner_mask(self.get(task)?))
    }

    pub fn tasks(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_task.keys().copied()
    }

    pub fn contains(&self, task: usize) -> bool {
        self.by_task.contains_key(&task)
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn units(&self) -> usize {
        self.units
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{softmax, StreamLabel};

    fn rand_logits(blocks: usize, units: usize, seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed, StreamLabel::Init);
        glorot_normal(vec![blocks, units], units, units, &mut rng).unwrap()
    }

    #[test]
    fn low_tau_sample_is_one_hot_at_noisy_argmax() {
        let logits = rand_logits(4, 5, 21);
        let mut rng = RngStream::new(3, StreamLabel::Gumbel);
        let gumbels = gumbel_noise(vec![4, 5], &mut rng);
        let sample = WinnerSample::from_parts(&logits, &gumbels, 0.001).unwrap();
        for b in 0..4 {
            let mut best = 0;
            let mut best_z = f32::NEG_INFINITY;
            for u in 0..5 {
                let z = logits.at(&[b, u]) + gumbels.at(&[b, u]);
                if z > best_z {
                    best_z = z;
                    best = u;
                }
            }
            for u in 0..5 {
                let xi = sample.xi_hat().at(&[b, u]);
                if u == best {
                    assert!(xi > 0.999, "block {b}: winner mass {xi}");
                } else {
                    assert!(xi < 1e-3, "block {b}: loser mass {xi}");
                }
            }
        }
    }

    #[test]
    fn sample_rows_lie_on_simplex() {
        let logits = rand_logits(6, 4, 5);
        for tau in [0.01f32, 0.1, 0.67] {
            let mut rng = RngStream::new(17, StreamLabel::Gumbel);
            let s = sample_relaxed_winners(&logits, tau, &mut rng).unwrap();
            for b in 0..6 {
                let mut sum = 0.0f64;
                for u in 0..4 {
                    let xi = s.xi_hat().at(&[b, u]);
                    assert!((0.0..=1.0).contains(&xi));
                    sum += xi as f64;
                }
                assert!((sum - 1.0).abs() < 1e-6, "tau {tau} block {b} sum {sum}");
            }
        }
    }

    #[test]
    fn rejects_nonpositive_tau() {
        let logits = rand_logits(2, 3, 1);
        let mut rng = RngStream::new(1, StreamLabel::Gumbel);
        assert!(sample_relaxed_winners(&logits, 0.0, &mut rng).is_err());
        assert!(sample_relaxed_winners(&logits, -1.0, &mut rng).is_err());
    }

    #[test]
    fn low_tau_winner_frequencies_match_posterior() {
        // Gumbel-max: the argmax of logits + gumbels is Categorical(softmax(logits)).
        let logits = Tensor::from_vec(vec![1, 4], vec![0.3, -0.4, 1.1, 0.0]).unwrap();
        let probs = softmax(&Tensor::from_vec(vec![4], logits.data().to_vec()).unwrap()).unwrap();
        let mut rng = RngStream::new(2024, StreamLabel::Gumbel);
        let draws = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            let s = sample_relaxed_winners(&logits, 0.01, &mut rng).unwrap();
            let row: Vec<f32> = (0..4).map(|u| s.xi_hat().at(&[0, u])).collect();
            let mut best = 0;
            for u in 1..4 {
                if row[u] > row[best] {
                    best = u;
                }
            }
            counts[best] += 1;
        }
        for u in 0..4 {
            let freq = counts[u] as f64 / draws as f64;
            let want = probs.data()[u] as f64;
            assert!(
                (freq - want).abs() <= 0.02,
                "unit {u}: freq {freq}, posterior {want}"
            );
        }
    }

    #[test]
    fn mask_picks_argmax() {
        let logits = Tensor::from_vec(vec![1, 3], vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(discrete_winner_mask(&logits).winners(), &[1]);
    }

    #[test]
    fn mask_ties_break_low() {
        let logits = Tensor::from_vec(vec![2, 3], vec![0.5, 0.5, 0.5, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(discrete_winner_mask(&logits).winners(), &[0, 1]);
    }

    #[test]
    fn mask_argmax_invariant_under_softmax_and_shift() {
        let mut rng = RngStream::new(31, StreamLabel::Init);
        for trial in 0..100 {
            let logits = glorot_normal(vec![1, 6], 6, 6, &mut rng).unwrap();
            let m1 = discrete_winner_mask(&logits);
            let probs =
                softmax(&Tensor::from_vec(vec![6], logits.data().to_vec()).unwrap()).unwrap();
            let mp = discrete_winner_mask(
                &Tensor::from_vec(vec![1, 6], probs.data().to_vec()).unwrap(),
            );
            assert_eq!(m1, mp, "trial {trial}: softmax changed the argmax");
            // Per-block constant shift leaves winners untouched.
            let shifted = Tensor::from_vec(
                vec![1, 6],
                logits.data().iter().map(|v| v + 3.25).collect(),
            )
            .unwrap();
            assert_eq!(m1, discrete_winner_mask(&shifted));
        }
    }

    #[test]
    fn one_hot_sample_matches_mask() {
        let mask = DiscreteMask::new(vec![2, 0, 1]);
        let s = WinnerSample::one_hot(&mask, 4);
        for (b, &w) in mask.winners().iter().enumerate() {
            for u in 0..4 {
                let want = if u == w { 1.0 } else { 0.0 };
                assert_eq!(s.xi_hat().at(&[b, u]), want);
            }
        }
    }

    #[test]
    fn task_logits_register_and_duplicate() {
        let mut tl = TaskLogits::new(3, 4);
        let mut rng = RngStream::new(9, StreamLabel::Init);
        tl.register(0, &mut rng).unwrap();
        tl.register(1, &mut rng).unwrap();
        assert!(matches!(
            tl.register(0, &mut rng),
            Err(Error::TaskAlreadyRegistered(0))
        ));
        assert!(tl.get(2).is_err());
        assert_ne!(tl.get(0).unwrap().data(), tl.get(1).unwrap().data());
    }

    #[test]
    fn registered_logit_std_tracks_block_size() {
        // units = 4 gives Glorot std sqrt(2 / (4 + 4)) = 0.5.
        let mut tl = TaskLogits::new(2000, 4);
        let mut rng = RngStream::new(77, StreamLabel::Init);
        tl.register(0, &mut rng).unwrap();
        let data = tl.get(0).unwrap().data();
        let var: f64 = data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / data.len() as f64;
        assert!((var.sqrt() - 0.5).abs() < 0.02, "std {}", var.sqrt());
    }
}
