//! Winner-based pruning: pack one task's surviving weights into dense
//! buffers and run inference from them alone.
//!
//! The pruned forward pass is bit-identical to the full model's task-aware
//! eval, not merely close: both paths accumulate the same f32 factors in
//! the same order through the same f64 kernels (`dot_strided`,
//! `conv_output_at`, and the shared pooling/head routines). Packing only
//! deletes terms the full path never writes into its output.

use crate::error::{Error, Result};
use crate::network::{
    head_forward_batch, maxpool2_forward_batch, Layer, LayerSpec, Model, ModelSpec,
};
use crate::numerics::{conv_output_at, dot_strided, Tensor};

/// A task-specific network with losers deleted: per block, only the winning
/// unit's weights remain (a `1/units` fraction per TWTA layer), plus the
/// full head. Self-contained — carries everything inference needs.
#[derive(Debug, Clone)]
pub struct PrunedModel {
    spec: ModelSpec,
    task: usize,
    /// Winning unit per block, one vector per TWTA layer in stack order.
    winners: Vec<Vec<usize>>,
    /// Packed winner weights per TWTA layer: dense `[in_dim, blocks]`,
    /// conv `[kernels, k_h, k_l, in_channels]`.
    packed: Vec<Tensor>,
    head_weight: Tensor,
    head_bias: Tensor,
}

impl PrunedModel {
    /// Extract the winners of `task` from a trained model.
    pub fn from_model(model: &Model, task: usize) -> Result<Self> {
        let masks = model.winner_masks(task)?;
        let mut winners = Vec::new();
        let mut packed = Vec::new();
        let mut t = 0usize;
        for layer in model.layers() {
            match layer {
                Layer::Dense(l) => {
                    let (e, i_blocks, j) = (l.in_dim(), l.blocks(), l.units());
                    let wd = l.weights().data();
                    let mut pd = vec![0.0f32; e * i_blocks];
                    for (i, &w) in masks[t].winners().iter().enumerate() {
                        for row in 0..e {
                            pd[row * i_blocks + i] = wd[(row * i_blocks + i) * j + w];
                        }
                    }
                    winners.push(masks[t].winners().to_vec());
                    packed.push(Tensor::from_vec(vec![e, i_blocks], pd)?);
                    t += 1;
                }
                Layer::Conv(l) => {
                    let (kh, kl) = l.kernel_dims();
                    let (ic, kc, j) = (l.in_channels(), l.kernel_count(), l.maps());
                    let kd = l.kernels().data();
                    let per_block = kh * kl * ic;
                    let mut pd = vec![0.0f32; kc * per_block];
                    for (i, &w) in masks[t].winners().iter().enumerate() {
                        for s in 0..per_block {
                            pd[i * per_block + s] = kd[(i * per_block + s) * j + w];
                        }
                    }
                    winners.push(masks[t].winners().to_vec());
                    packed.push(Tensor::from_vec(vec![kc, kh, kl, ic], pd)?);
                    t += 1;
                }
                _ => {}
            }
        }
        let (hw, hb) = model.head();
        Self::from_parts(
            model.spec().clone(),
            task,
            winners,
            packed,
            hw.clone(),
            hb.clone(),
        )
    }

    /// Assemble from stored parts (e.g. a deserialized export), validating
    /// every shape against the spec.
    pub fn from_parts(
        spec: ModelSpec,
        task: usize,
        winners: Vec<Vec<usize>>,
        packed: Vec<Tensor>,
        head_weight: Tensor,
        head_bias: Tensor,
    ) -> Result<Self> {
        let shapes = spec.validate()?;
        let twta: Vec<&LayerSpec> = spec
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::TwtaDense { .. } | LayerSpec::TwtaConv { .. }))
            .collect();
        if winners.len() != twta.len() || packed.len() != twta.len() {
            return Err(Error::Contract(format!(
                "pruned model carries {} winner lists and {} packed tensors for {} TWTA layers",
                winners.len(),
                packed.len(),
                twta.len()
            )));
        }
        for (idx, layer) in twta.iter().enumerate() {
            let (blocks, units, want_shape) = match layer {
                LayerSpec::TwtaDense {
                    in_dim,
                    blocks,
                    units,
                } => (*blocks, *units, vec![*in_dim, *blocks]),
                LayerSpec::TwtaConv {
                    kernel_h,
                    kernel_l,
                    in_channels,
                    kernels,
                    maps,
                } => (
                    *kernels,
                    *maps,
                    vec![*kernels, *kernel_h, *kernel_l, *in_channels],
                ),
                _ => unreachable!(),
            };
            if winners[idx].len() != blocks {
                return Err(Error::Contract(format!(
                    "TWTA layer {idx}: {} winners for {blocks} blocks",
                    winners[idx].len()
                )));
            }
            if let Some(&bad) = winners[idx].iter().find(|&&w| w >= units) {
                return Err(Error::Contract(format!(
                    "TWTA layer {idx}: winner {bad} out of range for {units} units"
                )));
            }
            if packed[idx].shape() != want_shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "pruned weights",
                    left: packed[idx].shape().to_vec(),
                    right: want_shape,
                });
            }
        }
        let features = shapes
            .last()
            .map(|s| s.input.clone())
            .unwrap_or_default();
        if head_weight.shape() != [features[0], spec.total_classes]
            || head_bias.shape() != [spec.total_classes]
        {
            return Err(Error::ShapeMismatch {
                op: "pruned head",
                left: head_weight.shape().to_vec(),
                right: vec![features[0], spec.total_classes],
            });
        }
        Ok(Self {
            spec,
            task,
            winners,
            packed,
            head_weight,
            head_bias,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn winners(&self) -> &[Vec<usize>] {
        &self.winners
    }

    pub fn packed(&self) -> &[Tensor] {
        &self.packed
    }

    pub fn head(&self) -> (&Tensor, &Tensor) {
        (&self.head_weight, &self.head_bias)
    }

    /// TWTA weights carried by this model (the retained count).
    pub fn retained_weights(&self) -> usize {
        self.packed.iter().map(|t| t.data().len()).sum()
    }

    /// Batch inference `[B, ...input_shape] -> [B, classes]`.
    ///
    /// Outputs are full-width with losing slots left at zero, exactly as
    /// the unpruned eval writes them, so pooling, flattening, and the head
    /// see byte-identical inputs.
    pub fn forward_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let want = &self.spec.input_shape;
        if batch.ndim() != want.len() + 1 || &batch.shape()[1..] != want.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "pruned model input",
                left: batch.shape().to_vec(),
                right: want.clone(),
            });
        }
        let bsz = batch.shape()[0];
        let mut cur = batch.clone();
        let mut t = 0usize;
        for layer in &self.spec.layers {
            cur = match layer {
                LayerSpec::TwtaDense {
                    in_dim,
                    blocks,
                    units,
                } => {
                    let out = self.dense_forward(&cur, t, *in_dim, *blocks, *units)?;
                    t += 1;
                    out
                }
                LayerSpec::TwtaConv {
                    kernel_h,
                    kernel_l,
                    in_channels,
                    kernels,
                    maps,
                } => {
                    let out = self.conv_forward(
                        &cur,
                        t,
                        (*kernel_h, *kernel_l, *in_channels),
                        *kernels,
                        *maps,
                    )?;
                    t += 1;
                    out
                }
                LayerSpec::MaxPool2 => maxpool2_forward_batch(&cur)?.0,
                LayerSpec::Flatten => {
                    let shape = cur.shape().to_vec();
                    cur.reshaped(vec![bsz, shape[1..].iter().product()])?
                }
                LayerSpec::Head { .. } => {
                    return head_forward_batch(&cur, &self.head_weight, &self.head_bias)
                }
            };
        }
        Err(Error::Contract("spec ended without a head layer".into()))
    }

    /// Single-example inference.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(input.shape());
        let batch = Tensor::from_vec(shape, input.data().to_vec())?;
        let out = self.forward_batch(&batch)?;
        out.reshaped(vec![self.spec.total_classes])
    }

    fn dense_forward(
        &self,
        inputs: &Tensor,
        t: usize,
        in_dim: usize,
        blocks: usize,
        units: usize,
    ) -> Result<Tensor> {
        if inputs.ndim() != 2 || inputs.shape()[1] != in_dim {
            return Err(Error::ShapeMismatch {
                op: "pruned twta_dense input",
                left: inputs.shape().to_vec(),
                right: vec![in_dim],
            });
        }
        let bsz = inputs.shape()[0];
        let feat = blocks * units;
        let mut y = Tensor::zeros(vec![bsz, feat]);
        let pd = self.packed[t].data();
        for b in 0..bsz {
            let row = &inputs.data()[b * in_dim..(b + 1) * in_dim];
            for (i, &w) in self.winners[t].iter().enumerate() {
                // Same f64 accumulation order as the full layer's
                // dot_strided over [in_dim, blocks*units]: the packed
                // stride skips exactly the columns the winner never reads.
                y.data_mut()[b * feat + i * units + w] = dot_strided(row, &pd[i..], blocks, in_dim);
            }
        }
        Ok(y)
    }

    fn conv_forward(
        &self,
        inputs: &Tensor,
        t: usize,
        (kh, kl, ic): (usize, usize, usize),
        kernel_count: usize,
        maps: usize,
    ) -> Result<Tensor> {
        if inputs.ndim() != 4 || inputs.shape()[3] != ic {
            return Err(Error::ShapeMismatch {
                op: "pruned twta_conv input",
                left: inputs.shape().to_vec(),
                right: vec![ic],
            });
        }
        let (bsz, h, l) = (inputs.shape()[0], inputs.shape()[1], inputs.shape()[2]);
        let oc = kernel_count * maps;
        let pad = kh / 2;
        let per_block = kh * kl * ic;
        let mut out = Tensor::zeros(vec![bsz, h, l, oc]);
        let in_stride = h * l * ic;
        let pd = self.packed[t].data();
        for b in 0..bsz {
            let img = &inputs.data()[b * in_stride..(b + 1) * in_stride];
            for (i, &w) in self.winners[t].iter().enumerate() {
                let ks = &pd[i * per_block..(i + 1) * per_block];
                for y in 0..h {
                    for x in 0..l {
                        // kj = 1, m = 0: the packed block holds only the
                        // winner map, at the same [kh, kl, ic] positions the
                        // full kernel visits.
                        let v = conv_output_at(img, ks, (h, l, ic), (kh, kl, 1), y, x, 0, pad);
                        out.data_mut()[((b * h + y) * l + x) * oc + i * maps + w] = v;
                    }
                }
            }
        }
        Ok(out)
    }
}
