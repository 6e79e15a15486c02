//! Convolutional layer with winner competition between feature maps.
//!
//! Kernels have shape `[kernel_count, k_h, k_l, in_channels, maps]`: kernel i
//! produces `maps` competing feature maps over a same-padded window, and one
//! winner sample entry gates each whole map. Inputs and outputs are
//! channels-last, `[H, L, C]`.

use crate::error::{Error, Result};
use crate::numerics::{check_conv_geometry, conv_output_at, glorot_normal, RngStream, Tensor};
use crate::twta::check_eps_g;
use crate::twta::sampling::{logits_grad_row, DiscreteMask, TaskLogits, WinnerSample};

#[derive(Debug, Clone)]
pub struct TwtaConvLayer {
    kernels: Tensor, // [kernel_count, k_h, k_l, in_channels, maps]
    logits: TaskLogits,
    kernel_count: usize,
    k_h: usize,
    k_l: usize,
    in_channels: usize,
    maps: usize,
    pad: usize,
}

/// Saved forward state: inputs `[B, H, L, C]` and pre-activations
/// `[B, H, L, kernel_count * maps]`, plus the winner sample.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub(crate) inputs: Tensor,
    pub(crate) preacts: Tensor,
    pub(crate) sample: WinnerSample,
}

impl ConvCache {
    pub fn sample(&self) -> &WinnerSample {
        &self.sample
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub kernels: Tensor,
    pub logits: Tensor,
    pub input: Tensor,
}

impl TwtaConvLayer {
    pub fn new(
        kernel_count: usize,
        k_h: usize,
        k_l: usize,
        in_channels: usize,
        maps: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if kernel_count == 0 || in_channels == 0 || maps == 0 {
            return Err(Error::Param(format!(
                "twta_conv dims must be positive, got kernels={kernel_count} \
                 in_channels={in_channels} maps={maps}"
            )));
        }
        let pad = k_h / 2;
        check_conv_geometry(k_h, k_l, pad)?;
        let kernels = glorot_normal(
            vec![kernel_count, k_h, k_l, in_channels, maps],
            k_h * k_l * in_channels,
            k_h * k_l * maps,
            rng,
        )?;
        Ok(Self {
            kernels,
            logits: TaskLogits::new(kernel_count, maps),
            kernel_count,
            k_h,
            k_l,
            in_channels,
            maps,
            pad,
        })
    }

    pub fn kernel_count(&self) -> usize {
        self.kernel_count
    }

    pub fn kernel_dims(&self) -> (usize, usize) {
        (self.k_h, self.k_l)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn maps(&self) -> usize {
        self.maps
    }

    pub fn out_channels(&self) -> usize {
        self.kernel_count * self.maps
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn kernels(&self) -> &Tensor {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut Tensor {
        &mut self.kernels
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

    fn kernel_slice(&self, i: usize) -> &[f32] {
        let block = self.k_h * self.k_l * self.in_channels * self.maps;
        &self.kernels.data()[i * block..(i + 1) * block]
    }

    fn check_inputs(&self, inputs: &Tensor) -> Result<(usize, usize, usize)> {
        if inputs.ndim() != 4 || inputs.shape()[3] != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "twta_conv input",
                left: inputs.shape().to_vec(),
                right: vec![self.in_channels],
            });
        }
        Ok((inputs.shape()[0], inputs.shape()[1], inputs.shape()[2]))
    }

    fn check_sample(&self, sample: &WinnerSample) -> Result<()> {
        if sample.blocks() != self.kernel_count || sample.units() != self.maps {
            return Err(Error::ShapeMismatch {
                op: "twta_conv winner sample",
                left: vec![sample.blocks(), sample.units()],
                right: vec![self.kernel_count, self.maps],
            });
        }
        Ok(())
    }

    fn check_mask(&self, mask: &DiscreteMask) -> Result<()> {
        if mask.blocks() != self.kernel_count {
            return Err(Error::ShapeMismatch {
                op: "twta_conv winner mask",
                left: vec![mask.blocks()],
                right: vec![self.kernel_count],
            });
        }
        if let Some(&w) = mask.winners().iter().find(|&&w| w >= self.maps) {
            return Err(Error::Param(format!(
                "winner index {w} out of range for {} maps per kernel",
                self.maps
            )));
        }
        Ok(())
    }

    fn check_cache(&self, cache: &ConvCache) -> Result<()> {
        let ok = cache.inputs.ndim() == 4
            && cache.inputs.shape()[3] == self.in_channels
            && cache.preacts.ndim() == 4
            && cache.preacts.shape()
                == [
                    cache.inputs.shape()[0],
                    cache.inputs.shape()[1],
                    cache.inputs.shape()[2],
                    self.out_channels(),
                ]
            && cache.sample.blocks() == self.kernel_count
            && cache.sample.units() == self.maps;
        if !ok {
            return Err(Error::Contract(format!(
                "forward cache with input shape {:?} does not belong to a twta_conv layer of \
                 kernels={} k={}x{} in_channels={} maps={}",
                cache.inputs.shape(),
                self.kernel_count,
                self.k_h,
                self.k_l,
                self.in_channels,
                self.maps
            )));
        }
        Ok(())
    }

    /// All `kernel_count * maps` pre-activation maps for a batch,
    /// `[B, H, L, out_channels]`. The inference path and the pruned export
    /// compute the same sums through `conv_output_at`, so winner channels
    /// agree bitwise across all three.
    fn preacts_batch(&self, inputs: &Tensor) -> Result<Tensor> {
        let (bsz, h, l) = self.check_inputs(inputs)?;
        let oc = self.out_channels();
        let mut pre = Tensor::zeros(vec![bsz, h, l, oc]);
        let in_stride = h * l * self.in_channels;
        let kdims = (self.k_h, self.k_l, self.maps);
        for b in 0..bsz {
            let img = &inputs.data()[b * in_stride..(b + 1) * in_stride];
            for i in 0..self.kernel_count {
                let ks = self.kernel_slice(i);
                for y in 0..h {
                    for x in 0..l {
                        for m in 0..self.maps {
                            let v = conv_output_at(
                                img,
                                ks,
                                (h, l, self.in_channels),
                                kdims,
                                y,
                                x,
                                m,
                                self.pad,
                            );
                            pre.data_mut()[((b * h + y) * l + x) * oc + i * self.maps + m] = v;
                        }
                    }
                }
            }
        }
        Ok(pre)
    }

    pub fn forward_train_batch(
        &self,
        inputs: &Tensor,
        sample: &WinnerSample,
    ) -> Result<(Tensor, ConvCache)> {
        self.check_sample(sample)?;
        let preacts = self.preacts_batch(inputs)?;
        let oc = self.out_channels();
        let xi = sample.xi_hat().data();
        let mut y = Tensor::zeros(preacts.shape().to_vec());
        let spatial = preacts.len() / oc;
        for p in 0..spatial {
            for f in 0..oc {
                y.data_mut()[p * oc + f] = xi[f] * preacts.data()[p * oc + f];
            }
        }
        let cache = ConvCache {
            inputs: inputs.clone(),
            preacts,
            sample: sample.clone(),
        };
        Ok((y, cache))
    }

    /// Single-example training forward: input `[H, L, C]`, output
    /// `[H, L, out_channels]`.
    pub fn forward_train(
        &self,
        input: &Tensor,
        sample: &WinnerSample,
    ) -> Result<(Tensor, ConvCache)> {
        let x4 = self.as_batch(input)?;
        let (y, cache) = self.forward_train_batch(&x4, sample)?;
        let s = y.shape().to_vec();
        Ok((y.reshaped(vec![s[1], s[2], s[3]])?, cache))
    }

    /// Inference forward: only winner maps are evaluated; loser channels are
    /// exact zeros.
    pub fn forward_eval_batch(&self, inputs: &Tensor, mask: &DiscreteMask) -> Result<Tensor> {
        self.check_mask(mask)?;
        let (bsz, h, l) = self.check_inputs(inputs)?;
        let oc = self.out_channels();
        let mut out = Tensor::zeros(vec![bsz, h, l, oc]);
        let in_stride = h * l * self.in_channels;
        let kdims = (self.k_h, self.k_l, self.maps);
        for b in 0..bsz {
            let img = &inputs.data()[b * in_stride..(b + 1) * in_stride];
            for (i, &w) in mask.winners().iter().enumerate() {
                let ks = self.kernel_slice(i);
                for y in 0..h {
                    for x in 0..l {
                        let v = conv_output_at(
                            img,
                            ks,
                            (h, l, self.in_channels),
                            kdims,
                            y,
                            x,
                            w,
                            self.pad,
                        );
                        out.data_mut()[((b * h + y) * l + x) * oc + i * self.maps + w] = v;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward_eval(&self, input: &Tensor, mask: &DiscreteMask) -> Result<Tensor> {
        let x4 = self.as_batch(input)?;
        let y = self.forward_eval_batch(&x4, mask)?;
        let s = y.shape().to_vec();
        y.reshaped(vec![s[1], s[2], s[3]])
    }

    /// Backward for a batch. Kernel and input gradients scatter from an
    /// ascending scan over (example, y, x); kernel-gradient accumulation is
    /// in f64 and rounds once at the end. Kernel slices whose winner share
    /// fell below `eps_g` are hard-zeroed; logit and input gradients are not
    /// masked.
    pub fn backward_batch(
        &self,
        cache: &ConvCache,
        d_out: &Tensor,
        eps_g: f32,
    ) -> Result<ConvGrads> {
        check_eps_g(eps_g)?;
        self.check_cache(cache)?;
        if !d_out.same_shape(&cache.preacts) {
            return Err(Error::ShapeMismatch {
                op: "twta_conv backward",
                left: d_out.shape().to_vec(),
                right: cache.preacts.shape().to_vec(),
            });
        }
        let (bsz, h, l) = (
            cache.inputs.shape()[0],
            cache.inputs.shape()[1],
            cache.inputs.shape()[2],
        );
        let (ic, oc) = (self.in_channels, self.out_channels());
        let xi = cache.sample.xi_hat().data();
        let xd = cache.inputs.data();
        let dyd = d_out.data();
        let kd = self.kernels.data();
        let kstride = self.k_h * self.k_l * ic * self.maps;

        let mut dk = vec![0.0f64; self.kernels.len()];
        let mut dx = vec![0.0f64; cache.inputs.len()];
        let mut v = vec![0.0f64; self.kernel_count * self.maps];

        for b in 0..bsz {
            for y in 0..h {
                for x in 0..l {
                    let base = ((b * h + y) * l + x) * oc;
                    for i in 0..self.kernel_count {
                        for m in 0..self.maps {
                            let f = i * self.maps + m;
                            let dy_v = dyd[base + f];
                            if dy_v == 0.0 {
                                continue;
                            }
                            v[f] += dy_v as f64 * cache.preacts.data()[base + f] as f64;
                            let da = (xi[f] * dy_v) as f64;
                            if da == 0.0 {
                                continue;
                            }
                            for ky in 0..self.k_h {
                                let iy = y + ky;
                                if iy < self.pad || iy - self.pad >= h {
                                    continue;
                                }
                                let iy = iy - self.pad;
                                for kx in 0..self.k_l {
                                    let ix = x + kx;
                                    if ix < self.pad || ix - self.pad >= l {
                                        continue;
                                    }
                                    let ix = ix - self.pad;
                                    let in_base = ((b * h + iy) * l + ix) * ic;
                                    let k_base = i * kstride
                                        + ((ky * self.k_l + kx) * ic) * self.maps
                                        + m;
                                    for c in 0..ic {
                                        let xv = xd[in_base + c] as f64;
                                        let kv = kd[k_base + c * self.maps] as f64;
                                        dk[k_base + c * self.maps] += da * xv;
                                        dx[in_base + c] += da * kv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut d_kernels = Tensor::zeros(self.kernels.shape().to_vec());
        for i in 0..self.kernel_count {
            for m in 0..self.maps {
                if xi[i * self.maps + m] < eps_g {
                    continue; // masked: the whole [k_h, k_l, in_channels] slice stays zero
                }
                for t in 0..self.k_h * self.k_l * ic {
                    let idx = i * kstride + t * self.maps + m;
                    d_kernels.data_mut()[idx] = dk[idx] as f32;
                }
            }
        }

        let mut d_logits = Tensor::zeros(vec![self.kernel_count, self.maps]);
        for i in 0..self.kernel_count {
            logits_grad_row(
                &xi[i * self.maps..(i + 1) * self.maps],
                &v[i * self.maps..(i + 1) * self.maps],
                cache.sample.tau(),
                &mut d_logits.data_mut()[i * self.maps..(i + 1) * self.maps],
            );
        }

        let mut d_input = Tensor::zeros(cache.inputs.shape().to_vec());
        for (out, &acc) in d_input.data_mut().iter_mut().zip(&dx) {
            *out = acc as f32;
        }

        Ok(ConvGrads {
            kernels: d_kernels,
            logits: d_logits,
            input: d_input,
        })
    }

    /// Single-example backward: `d_out` is `[H, L, out_channels]`, the
    /// returned input gradient is `[H, L, C]`.
    pub fn backward(&self, cache: &ConvCache, d_out: &Tensor, eps_g: f32) -> Result<ConvGrads> {
        if d_out.ndim() != 3 {
            return Err(Error::ShapeMismatch {
                op: "twta_conv backward",
                left: d_out.shape().to_vec(),
                right: vec![self.out_channels()],
            });
        }
        let s = d_out.shape().to_vec();
        let d4 = Tensor::from_vec(vec![1, s[0], s[1], s[2]], d_out.data().to_vec())?;
        let mut grads = self.backward_batch(cache, &d4, eps_g)?;
        let is = grads.input.shape().to_vec();
        grads.input = grads.input.reshaped(vec![is[1], is[2], is[3]])?;
        Ok(grads)
    }

    fn as_batch(&self, input: &Tensor) -> Result<Tensor> {
        if input.ndim() != 3 || input.shape()[2] != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "twta_conv input",
                left: input.shape().to_vec(),
                right: vec![self.in_channels],
            });
        }
        let s = input.shape().to_vec();
        Tensor::from_vec(vec![1, s[0], s[1], s[2]], input.data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{conv2d_same, gumbel_noise, StreamLabel};
    use crate::twta::sampling::sample_relaxed_winners;

    fn layer(
        kernel_count: usize,
        k: usize,
        in_channels: usize,
        maps: usize,
        seed: u64,
    ) -> TwtaConvLayer {
        let mut rng = RngStream::new(seed, StreamLabel::Init);
        TwtaConvLayer::new(kernel_count, k, k, in_channels, maps, &mut rng).unwrap()
    }

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = RngStream::with_salt(seed, StreamLabel::Init, 171);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal() as f32).collect()).unwrap()
    }

    fn probe_logits(layer: &TwtaConvLayer, seed: u64) -> Tensor {
        let mut rng = RngStream::with_salt(seed, StreamLabel::Init, 7);
        glorot_normal(
            vec![layer.kernel_count(), layer.maps()],
            layer.maps(),
            layer.maps(),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn forward_matches_per_kernel_convolution() {
        let layer = layer(2, 3, 2, 2, 31);
        let x = rand_tensor(vec![5, 5, 2], 1);
        let mut rng = RngStream::new(5, StreamLabel::Gumbel);
        let sample = sample_relaxed_winners(&probe_logits(&layer, 0), 0.67, &mut rng).unwrap();
        let (y, _) = layer.forward_train(&x, &sample).unwrap();

        let kstride = 3 * 3 * 2 * 2;
        for i in 0..2 {
            let k = Tensor::from_vec(
                vec![3, 3, 2, 2],
                layer.kernels().data()[i * kstride..(i + 1) * kstride].to_vec(),
            )
            .unwrap();
            let conv = conv2d_same(&x, &k, 1).unwrap();
            for yy in 0..5 {
                for xx in 0..5 {
                    for m in 0..2 {
                        let got = y.at(&[yy, xx, i * 2 + m]);
                        let want = sample.xi_hat().at(&[i, m]) * conv.at(&[yy, xx, m]);
                        assert!(
                            (got - want).abs() < 1e-6,
                            "({yy},{xx},{i},{m}): got {got}, want {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn eval_keeps_only_winner_maps() {
        let layer = layer(3, 3, 1, 2, 37);
        let x = rand_tensor(vec![4, 4, 1], 2);
        let mask = DiscreteMask::new(vec![1, 0, 1]);
        let y = layer.forward_eval(&x, &mask).unwrap();
        for yy in 0..4 {
            for xx in 0..4 {
                let mut zeros = 0;
                for i in 0..3 {
                    for m in 0..2 {
                        let v = y.at(&[yy, xx, i * 2 + m]);
                        if m != mask.winners()[i] {
                            assert_eq!(v, 0.0, "loser map ({i},{m}) leaked at ({yy},{xx})");
                            zeros += 1;
                        }
                    }
                }
                assert_eq!(zeros, 3 * (2 - 1));
            }
        }
    }

    #[test]
    fn eval_equals_train_under_one_hot_sample() {
        let layer = layer(2, 3, 2, 3, 43);
        let x = rand_tensor(vec![6, 6, 2], 3);
        let mask = DiscreteMask::new(vec![2, 0]);
        let sample = WinnerSample::one_hot(&mask, 3);
        let (y_train, _) = layer.forward_train(&x, &sample).unwrap();
        let y_eval = layer.forward_eval(&x, &mask).unwrap();
        assert_eq!(y_train.data(), y_eval.data(), "paths disagree bitwise");
    }

    #[test]
    fn zero_upstream_gradient_zeroes_everything() {
        let layer = layer(2, 3, 1, 2, 47);
        let x = rand_tensor(vec![4, 4, 1], 4);
        let mut rng = RngStream::new(6, StreamLabel::Gumbel);
        let sample = sample_relaxed_winners(&probe_logits(&layer, 0), 0.67, &mut rng).unwrap();
        let (y, cache) = layer.forward_train(&x, &sample).unwrap();
        let grads = layer
            .backward(&cache, &Tensor::zeros(y.shape().to_vec()), 0.0)
            .unwrap();
        assert!(grads.kernels.data().iter().all(|&g| g == 0.0));
        assert!(grads.logits.data().iter().all(|&g| g == 0.0));
        assert!(grads.input.data().iter().all(|&g| g == 0.0));
    }

    /// Central finite differences of sum(y^2)/2 against the analytic
    /// backward, eps_g = 0, Gumbel noise frozen across perturbations.
    #[test]
    fn backward_matches_finite_differences() {
        let base = layer(2, 3, 1, 2, 53);
        let logits0 = rand_tensor(vec![2, 2], 5);
        let mut grng = RngStream::new(9, StreamLabel::Gumbel);
        let gumbels = gumbel_noise(vec![2, 2], &mut grng);
        let tau = 0.5f32;
        let x0 = rand_tensor(vec![4, 4, 1], 6);

        let loss = |layer: &TwtaConvLayer, x: &Tensor, logits: &Tensor| -> f64 {
            let sample = WinnerSample::from_parts(logits, &gumbels, tau).unwrap();
            let (y, _) = layer.forward_train(x, &sample).unwrap();
            y.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 2.0
        };

        let sample = WinnerSample::from_parts(&logits0, &gumbels, tau).unwrap();
        let (y, cache) = base.forward_train(&x0, &sample).unwrap();
        let grads = base.backward(&cache, &y, 0.0).unwrap();

        let check = |analytic: f32, numeric: f64, what: &str| {
            let tol = 1e-4 + 1e-3 * (analytic.abs() as f64).max(numeric.abs());
            assert!(
                (analytic as f64 - numeric).abs() <= tol,
                "{what}: analytic {analytic}, numeric {numeric}"
            );
        };

        for idx in 0..base.kernels().len() {
            let w = base.kernels().data()[idx];
            let h = 1e-3f32.max(1e-3 * w.abs());
            let mut lp = base.clone();
            lp.kernels_mut().data_mut()[idx] = w + h;
            let mut lm = base.clone();
            lm.kernels_mut().data_mut()[idx] = w - h;
            let denom = (w + h) as f64 - (w - h) as f64;
            let num = (loss(&lp, &x0, &logits0) - loss(&lm, &x0, &logits0)) / denom;
            check(grads.kernels.data()[idx], num, &format!("kernel {idx}"));
        }
        for idx in 0..logits0.len() {
            let lv = logits0.data()[idx];
            let h = 1e-3f32;
            let mut lp = logits0.clone();
            lp.data_mut()[idx] = lv + h;
            let mut lm = logits0.clone();
            lm.data_mut()[idx] = lv - h;
            let denom = (lv + h) as f64 - (lv - h) as f64;
            let num = (loss(&base, &x0, &lp) - loss(&base, &x0, &lm)) / denom;
            check(grads.logits.data()[idx], num, &format!("logit {idx}"));
        }
        for idx in 0..x0.len() {
            let xv = x0.data()[idx];
            let h = 1e-3f32;
            let mut xp = x0.clone();
            xp.data_mut()[idx] = xv + h;
            let mut xm = x0.clone();
            xm.data_mut()[idx] = xv - h;
            let denom = (xv + h) as f64 - (xv - h) as f64;
            let num = (loss(&base, &xp, &logits0) - loss(&base, &xm, &logits0)) / denom;
            check(grads.input.data()[idx], num, &format!("input {idx}"));
        }
    }

    #[test]
    fn cold_sample_masks_loser_kernel_slices() {
        let layer = layer(3, 3, 2, 4, 59);
        let x = rand_tensor(vec![5, 5, 2], 7);
        let mut rng = RngStream::new(11, StreamLabel::Gumbel);
        let sample = sample_relaxed_winners(&probe_logits(&layer, 0), 0.01, &mut rng).unwrap();
        let (y, cache) = layer.forward_train(&x, &sample).unwrap();
        let d_out = rand_tensor(y.shape().to_vec(), 8);
        let grads = layer.backward(&cache, &d_out, 1e-3).unwrap();
        let slice = 3 * 3 * 2; // per-(kernel, map) weight count
        let zeros = grads.kernels.data().iter().filter(|&&g| g == 0.0).count();
        assert!(
            zeros >= 3 * (4 - 1) * slice,
            "only {zeros} zero kernel-grad entries"
        );
        // Logit gradients survive masking.
        assert!(grads.logits.data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn batch_backward_sums_single_example_grads() {
        let layer = layer(2, 3, 1, 2, 61);
        let logits = probe_logits(&layer, 1);
        let mut rng = RngStream::new(13, StreamLabel::Gumbel);
        let sample = sample_relaxed_winners(&logits, 0.67, &mut rng).unwrap();
        let xb = rand_tensor(vec![2, 4, 4, 1], 9);
        let dyb = rand_tensor(vec![2, 4, 4, 4], 10);

        let (_, bcache) = layer.forward_train_batch(&xb, &sample).unwrap();
        let bgrads = layer.backward_batch(&bcache, &dyb, 0.0).unwrap();

        let mut sum_k = vec![0.0f64; layer.kernels().len()];
        let mut sum_l = vec![0.0f64; 4];
        for b in 0..2 {
            let x = Tensor::from_vec(
                vec![4, 4, 1],
                xb.data()[b * 16..(b + 1) * 16].to_vec(),
            )
            .unwrap();
            let dy = Tensor::from_vec(
                vec![4, 4, 4],
                dyb.data()[b * 64..(b + 1) * 64].to_vec(),
            )
            .unwrap();
            let (_, cache) = layer.forward_train(&x, &sample).unwrap();
            let g = layer.backward(&cache, &dy, 0.0).unwrap();
            for (s, v) in sum_k.iter_mut().zip(g.kernels.data()) {
                *s += *v as f64;
            }
            for (s, v) in sum_l.iter_mut().zip(g.logits.data()) {
                *s += *v as f64;
            }
        }
        for (idx, (&got, want)) in bgrads.kernels.data().iter().zip(&sum_k).enumerate() {
            assert!(
                (got as f64 - want).abs() < 1e-5,
                "kernel grad {idx}: batch {got}, summed {want}"
            );
        }
        for (idx, (&got, want)) in bgrads.logits.data().iter().zip(&sum_l).enumerate() {
            assert!(
                (got as f64 - want).abs() < 1e-5,
                "logit grad {idx}: batch {got}, summed {want}"
            );
        }
    }

    #[test]
    fn geometry_and_shape_errors() {
        let mut rng = RngStream::new(1, StreamLabel::Init);
        // Even kernels have no symmetric same-padding.
        assert!(TwtaConvLayer::new(2, 2, 2, 1, 2, &mut rng).is_err());
        assert!(TwtaConvLayer::new(2, 3, 5, 1, 2, &mut rng).is_err());

        let layer = layer(2, 3, 2, 2, 67);
        let bad_channels = Tensor::zeros(vec![4, 4, 3]);
        let mask = DiscreteMask::new(vec![0, 1]);
        assert!(layer.forward_eval(&bad_channels, &mask).is_err());
        assert!(layer
            .forward_eval(&Tensor::zeros(vec![4, 4, 2]), &DiscreteMask::new(vec![0]))
            .is_err());
        assert!(layer
            .forward_eval(&Tensor::zeros(vec![4, 4, 2]), &DiscreteMask::new(vec![0, 9]))
            .is_err());
    }

    #[test]
    fn register_and_mask_round_trip() {
        let mut layer = layer(4, 3, 1, 3, 71);
        let mut rng = RngStream::new(2, StreamLabel::Init);
        layer.register_task(0, &mut rng).unwrap();
        assert!(layer.register_task(0, &mut rng).is_err());
        let mask = layer.winner_mask(0).unwrap();
        assert_eq!(mask.blocks(), 4);
        assert!(mask.winners().iter().all(|&w| w < 3));
    }
}
