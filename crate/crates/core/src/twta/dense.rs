//! Fully connected layer with block-wise winner competition.
//!
//! Weights have shape `[in_dim, blocks, units]`: each block holds `units`
//! competing linear units over the same input. Training scales every unit's
//! pre-activation by its relaxed winner share; inference keeps only each
//! block's argmax winner, so exactly `1/units` of the layer runs.

use crate::error::{Error, Result};
use crate::numerics::{dot_strided, glorot_normal, RngStream, Tensor};
use crate::twta::sampling::{logits_grad_row, DiscreteMask, TaskLogits, WinnerSample};
use crate::twta::check_eps_g;

#[derive(Debug, Clone)]
pub struct TwtaDenseLayer {
    weights: Tensor, // [in_dim, blocks, units]
    logits: TaskLogits,
    in_dim: usize,
    blocks: usize,
    units: usize,
}

/// Saved forward state for the backward pass: inputs `[B, in_dim]`,
/// pre-activations `[B, blocks * units]`, and the winner sample that scaled
/// them.
#[derive(Debug, Clone)]
pub struct DenseCache {
    pub(crate) inputs: Tensor,
    pub(crate) preacts: Tensor,
    pub(crate) sample: WinnerSample,
}

impl DenseCache {
    pub fn sample(&self) -> &WinnerSample {
        &self.sample
    }
}

/// Gradients from one backward call. `input` matches the shape the forward
/// pass saw (`[in_dim]` or `[B, in_dim]`).
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub weights: Tensor,
    pub logits: Tensor,
    pub input: Tensor,
}

impl TwtaDenseLayer {
    pub fn new(in_dim: usize, blocks: usize, units: usize, rng: &mut RngStream) -> Result<Self> {
        if in_dim == 0 || blocks == 0 || units == 0 {
            return Err(Error::Param(format!(
                "twta_dense dims must be positive, got in_dim={in_dim} blocks={blocks} units={units}"
            )));
        }
        let weights = glorot_normal(
            vec![in_dim, blocks, units],
            in_dim,
            blocks * units,
            rng,
        )?;
        Ok(Self {
            weights,
            logits: TaskLogits::new(blocks, units),
            in_dim,
            blocks,
            units,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn out_dim(&self) -> usize {
        self.blocks * self.units
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn logits(&self) -> &TaskLogits {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut TaskLogits {
        &mut self.logits
    }

    pub fn register_task(&mut self, task: usize, rng: &mut RngStream) -> Result<()> {
        self.logits.register(task, rng)
    }

    pub fn winner_mask(&self, task: usize) -> Result<DiscreteMask> {
        self.logits.winner_mask(task)
    }

    /// Pre-activations for a `[B, in_dim]` batch, shape `[B, blocks * units]`.
    /// Row-major `[in_dim][blocks][units]` weights flatten to the
    /// `[in_dim, blocks * units]` matrix this multiplies by.
    fn preacts_batch(&self, inputs: &Tensor) -> Result<(usize, Tensor)> {
        if inputs.ndim() != 2 || inputs.shape()[1] != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "twta_dense input",
                left: inputs.shape().to_vec(),
                right: vec![self.in_dim],
            });
        }
        let bsz = inputs.shape()[0];
        let feat = self.out_dim();
        let mut pre = Tensor::zeros(vec![bsz, feat]);
        let wd = self.weights.data();
        for b in 0..bsz {
            let row = &inputs.data()[b * self.in_dim..(b + 1) * self.in_dim];
            for f in 0..feat {
                pre.data_mut()[b * feat + f] = dot_strided(row, &wd[f..], feat, self.in_dim);
            }
        }
        Ok((bsz, pre))
    }

    fn check_sample(&self, sample: &WinnerSample) -> Result<()> {
        if sample.blocks() != self.blocks || sample.units() != self.units {
            return Err(Error::ShapeMismatch {
                op: "twta_dense winner sample",
                left: vec![sample.blocks(), sample.units()],
                right: vec![self.blocks, self.units],
            });
        }
        Ok(())
    }

    fn check_mask(&self, mask: &DiscreteMask) -> Result<()> {
        if mask.blocks() != self.blocks {
            return Err(Error::ShapeMismatch {
                op: "twta_dense winner mask",
                left: vec![mask.blocks()],
                right: vec![self.blocks],
            });
        }
        if let Some(&w) = mask.winners().iter().find(|&&w| w >= self.units) {
            return Err(Error::Param(format!(
                "winner index {w} out of range for {} units per block",
                self.units
            )));
        }
        Ok(())
    }

    fn check_cache(&self, cache: &DenseCache) -> Result<()> {
        let ok = cache.inputs.ndim() == 2
            && cache.inputs.shape()[1] == self.in_dim
            && cache.preacts.ndim() == 2
            && cache.preacts.shape() == [cache.inputs.shape()[0], self.out_dim()]
            && cache.sample.blocks() == self.blocks
            && cache.sample.units() == self.units;
        if !ok {
            return Err(Error::Contract(format!(
                "forward cache with input shape {:?} does not belong to a twta_dense layer of \
                 in_dim={} blocks={} units={}",
                cache.inputs.shape(),
                self.in_dim,
                self.blocks,
                self.units
            )));
        }
        Ok(())
    }

    /// Training forward for a batch: `y = xi_hat ⊙ preacts`, broadcasting the
    /// one sample across all rows.
    pub fn forward_train_batch(
        &self,
        inputs: &Tensor,
        sample: &WinnerSample,
    ) -> Result<(Tensor, DenseCache)> {
        self.check_sample(sample)?;
        let (bsz, preacts) = self.preacts_batch(inputs)?;
        let feat = self.out_dim();
        let xi = sample.xi_hat().data();
        let mut y = Tensor::zeros(vec![bsz, feat]);
        for b in 0..bsz {
            for f in 0..feat {
                y.data_mut()[b * feat + f] = xi[f] * preacts.data()[b * feat + f];
            }
        }
        let cache = DenseCache {
            inputs: inputs.clone(),
            preacts,
            sample: sample.clone(),
        };
        Ok((y, cache))
    }

    /// Single-example training forward: input `[in_dim]`, output
    /// `[blocks * units]`.
    pub fn forward_train(
        &self,
        input: &Tensor,
        sample: &WinnerSample,
    ) -> Result<(Tensor, DenseCache)> {
        let row = self.as_row(input)?;
        let (y, cache) = self.forward_train_batch(&row, sample)?;
        Ok((y.reshaped(vec![self.out_dim()])?, cache))
    }

    /// Inference forward: each block's winner passes its pre-activation
    /// through untouched, every other unit emits an exact 0.0.
    pub fn forward_eval_batch(&self, inputs: &Tensor, mask: &DiscreteMask) -> Result<Tensor> {
        self.check_mask(mask)?;
        let (bsz, preacts) = self.preacts_batch(inputs)?;
        let feat = self.out_dim();
        let mut y = Tensor::zeros(vec![bsz, feat]);
        for b in 0..bsz {
            for (i, &w) in mask.winners().iter().enumerate() {
                let f = i * self.units + w;
                y.data_mut()[b * feat + f] = preacts.data()[b * feat + f];
            }
        }
        Ok(y)
    }

    pub fn forward_eval(&self, input: &Tensor, mask: &DiscreteMask) -> Result<Tensor> {
        let row = self.as_row(input)?;
        let y = self.forward_eval_batch(&row, mask)?;
        y.reshaped(vec![self.out_dim()])
    }

    /// Backward for a batch. Gradient flow:
    /// - d_act = xi_hat ⊙ d_out feeds both the weight and input gradients;
    /// - weight gradients for units whose winner share fell below `eps_g`
    ///   are hard-zeroed (the sparsification knob); logits and input
    ///   gradients are never masked;
    /// - logit gradients go through the tempered-softmax Jacobian using
    ///   v[i][j] = sum over the batch of d_out ⊙ preacts.
    pub fn backward_batch(
        &self,
        cache: &DenseCache,
        d_out: &Tensor,
        eps_g: f32,
    ) -> Result<DenseGrads> {
        check_eps_g(eps_g)?;
        self.check_cache(cache)?;
        if !d_out.same_shape(&cache.preacts) {
            return Err(Error::ShapeMismatch {
                op: "twta_dense backward",
                left: d_out.shape().to_vec(),
                right: cache.preacts.shape().to_vec(),
            });
        }
        let bsz = cache.inputs.shape()[0];
        let feat = self.out_dim();
        let xi = cache.sample.xi_hat().data();
        let xd = cache.inputs.data();
        let dyd = d_out.data();

        let mut d_act = vec![0.0f32; bsz * feat];
        for b in 0..bsz {
            for f in 0..feat {
                d_act[b * feat + f] = xi[f] * dyd[b * feat + f];
            }
        }

        let mut d_weights = Tensor::zeros(vec![self.in_dim, self.blocks, self.units]);
        for f in 0..feat {
            if xi[f] < eps_g {
                continue; // masked: the whole [in_dim] slice stays zero
            }
            for e in 0..self.in_dim {
                let mut acc = 0.0f64;
                for b in 0..bsz {
                    acc += d_act[b * feat + f] as f64 * xd[b * self.in_dim + e] as f64;
                }
                d_weights.data_mut()[e * feat + f] = acc as f32;
            }
        }

        let mut v = vec![0.0f64; feat];
        for b in 0..bsz {
            for f in 0..feat {
                v[f] += dyd[b * feat + f] as f64 * cache.preacts.data()[b * feat + f] as f64;
            }
        }
        let mut d_logits = Tensor::zeros(vec![self.blocks, self.units]);
        for i in 0..self.blocks {
            logits_grad_row(
                &xi[i * self.units..(i + 1) * self.units],
                &v[i * self.units..(i + 1) * self.units],
                cache.sample.tau(),
                &mut d_logits.data_mut()[i * self.units..(i + 1) * self.units],
            );
        }

        let wd = self.weights.data();
        let mut d_input = Tensor::zeros(vec![bsz, self.in_dim]);
        for b in 0..bsz {
            for e in 0..self.in_dim {
                let mut acc = 0.0f64;
                for f in 0..feat {
                    acc += wd[e * feat + f] as f64 * d_act[b * feat + f] as f64;
                }
                d_input.data_mut()[b * self.in_dim + e] = acc as f32;
            }
        }

        Ok(DenseGrads {
            weights: d_weights,
            logits: d_logits,
            input: d_input,
        })
    }

    /// Single-example backward: `d_out` is `[blocks * units]`, the returned
    /// input gradient is `[in_dim]`.
    pub fn backward(&self, cache: &DenseCache, d_out: &Tensor, eps_g: f32) -> Result<DenseGrads> {
        if d_out.ndim() != 1 || d_out.len() != self.out_dim() {
            return Err(Error::ShapeMismatch {
                op: "twta_dense backward",
                left: d_out.shape().to_vec(),
                right: vec![self.out_dim()],
            });
        }
        let d2 = Tensor::from_vec(vec![1, self.out_dim()], d_out.data().to_vec())?;
        let mut grads = self.backward_batch(cache, &d2, eps_g)?;
        grads.input = grads.input.reshaped(vec![self.in_dim])?;
        Ok(grads)
    }

    fn as_row(&self, input: &Tensor) -> Result<Tensor> {
        if input.ndim() != 1 || input.len() != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "twta_dense input",
                left: input.shape().to_vec(),
                right: vec![self.in_dim],
            });
        }
        Tensor::from_vec(vec![1, self.in_dim], input.data().to_vec())
    }
}
