//! Runtime gradient verification: random layer and model instances checked
//! against central finite differences. Callable from the CLI selftest, not
//! just the test suite.
//!
//! Winner noise is frozen per instance: the Gumbel draw happens once and
//! logit perturbations re-derive the relaxed sample from the same noise, so
//! the loss stays a smooth function of every parameter. The layer losses
//! are quadratic in weights and inputs (sum of squared outputs), making the
//! central difference exact there up to rounding; logits and the
//! cross-entropy model check go through genuinely curved paths, so their
//! steps are kept small.

use crate::error::{Error, Result};
use crate::network::{build_model, LayerSpec, Model, ModelSpec};
use crate::numerics::{gumbel_noise, RngStream, StreamLabel, Tensor};
use crate::training::cross_entropy;
use crate::twta::{TwtaConvLayer, TwtaDenseLayer, WinnerSample};

/// Scale below which a relative error is meaningless; such entries are held
/// to the absolute half of the tolerance instead.
const REL_SCALE_FLOOR: f64 = 1e-2;
const ABS_TOL: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSummary {
    pub instances: usize,
    /// Total parameter entries compared.
    pub checks: usize,
    /// Worst relative error among entries with |grad| above the scale
    /// floor.
    pub max_rel_error: f64,
    /// Worst absolute difference over every entry.
    pub max_abs_error: f64,
    /// Site of the worst relative error.
    pub worst: String,
}

impl GradCheckSummary {
    fn empty() -> Self {
        Self {
            instances: 0,
            checks: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: String::new(),
        }
    }

    /// One comparison. Fails the whole check if the combined
    /// absolute/relative tolerance is breached.
    fn record(&mut self, analytic: f64, numeric: f64, site: &str) -> Result<()> {
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        if diff > ABS_TOL + REL_TOL * scale {
            return Err(Error::Contract(format!(
                "gradient check failed at {site}: analytic {analytic:.6e} vs \
                 finite difference {numeric:.6e} (diff {diff:.3e})"
            )));
        }
        self.checks += 1;
        self.max_abs_error = self.max_abs_error.max(diff);
        if scale >= REL_SCALE_FLOOR {
            let rel = diff / scale;
            if rel > self.max_rel_error {
                self.max_rel_error = rel;
                self.worst = site.to_string();
            }
        }
        Ok(())
    }
}

fn sum_squares_half(y: &Tensor) -> f64 {
    y.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / 2.0
}

fn normal_tensor(shape: Vec<usize>, scale: f64, rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| (rng.normal() * scale) as f32).collect())
        .expect("shape/product invariant")
}

/// Symmetric perturbation sizes. The actually-applied f32 values define
/// the difference quotient's denominator, so rounding in `v ± h` cancels.
fn steps(v: f32, h_base: f32) -> (f32, f32, f64) {
    let h = h_base * v.abs().max(1.0);
    let vp = v + h;
    let vm = v - h;
    (vp, vm, vp as f64 - vm as f64)
}

/// Randomized dense-layer instances: weights, logits, and input gradients
/// all checked entry-by-entry against central differences under frozen
/// winner noise.
pub fn check_dense_instances(instances: usize, seed: u64) -> Result<GradCheckSummary> {
    let mut summary = GradCheckSummary::empty();
    for inst in 0..instances {
        let mut rng = RngStream::with_salt(seed, StreamLabel::Init, inst as u64);
        let e = 2 + rng.index(7); // 2..=8
        let i = 1 + rng.index(4); // 1..=4
        let j = 1 + rng.index(4); // 1..=4
        let b = 1 + rng.index(4); // 1..=4
        let tau = (0.4 + 0.7 * rng.uniform()) as f32;
        let mut layer = TwtaDenseLayer::new(e, i, j, &mut rng)?;
        let inputs = normal_tensor(vec![b, e], 1.0, &mut rng);
        let logits = normal_tensor(vec![i, j], 0.7, &mut rng);
        let mut grng = RngStream::with_salt(seed, StreamLabel::Gumbel, inst as u64);
        let gumbels = gumbel_noise(vec![i, j], &mut grng);
        let sample = WinnerSample::from_parts(&logits, &gumbels, tau)?;
        let site = |what: &str, idx: usize| {
            format!("dense instance {inst} (e={e} i={i} j={j} b={b} tau={tau:.3}) {what}[{idx}]")
        };

        let (y, cache) = layer.forward_train_batch(&inputs, &sample)?;
        let grads = layer.backward_batch(&cache, &y, 0.0)?;

        // Weights: loss is quadratic in w, so a generous step is exact.
        for idx in 0..layer.weights().data().len() {
            let v = layer.weights().data()[idx];
            let (vp, vm, denom) = steps(v, 0.05);
            layer.weights_mut().data_mut()[idx] = vp;
            let lp = sum_squares_half(&layer.forward_train_batch(&inputs, &sample)?.0);
            layer.weights_mut().data_mut()[idx] = vm;
            let lm = sum_squares_half(&layer.forward_train_batch(&inputs, &sample)?.0);
            layer.weights_mut().data_mut()[idx] = v;
            summary.record(
                grads.weights.data()[idx] as f64,
                (lp - lm) / denom,
                &site("weights", idx),
            )?;
        }

        // Logits: curved through the tempered softmax; small steps.
        for idx in 0..logits.data().len() {
            let v = logits.data()[idx];
            let (vp, vm, denom) = steps(v, 5e-3);
            let mut lp_t = logits.clone();
            lp_t.data_mut()[idx] = vp;
            let sp = WinnerSample::from_parts(&lp_t, &gumbels, tau)?;
            let lp = sum_squares_half(&layer.forward_train_batch(&inputs, &sp)?.0);
            let mut lm_t = logits.clone();
            lm_t.data_mut()[idx] = vm;
            let sm = WinnerSample::from_parts(&lm_t, &gumbels, tau)?;
            let lm = sum_squares_half(&layer.forward_train_batch(&inputs, &sm)?.0);
            summary.record(
                grads.logits.data()[idx] as f64,
                (lp - lm) / denom,
                &site("logits", idx),
            )?;
        }

        // Inputs: quadratic again.
        let mut probe = inputs.clone();
        for idx in 0..probe.data().len() {
            let v = probe.data()[idx];
            let (vp, vm, denom) = steps(v, 0.05);
            probe.data_mut()[idx] = vp;
            let lp = sum_squares_half(&layer.forward_train_batch(&probe, &sample)?.0);
            probe.data_mut()[idx] = vm;
            let lm = sum_squares_half(&layer.forward_train_batch(&probe, &sample)?.0);
            probe.data_mut()[idx] = v;
            summary.record(
                grads.input.data()[idx] as f64,
                (lp - lm) / denom,
                &site("input", idx),
            )?;
        }
        summary.instances += 1;
    }
    Ok(summary)
}

/// Randomized conv-layer instances, same protocol as the dense check.
pub fn check_conv_instances(instances: usize, seed: u64) -> Result<GradCheckSummary> {
    let mut summary = GradCheckSummary::empty();
    for inst in 0..instances {
        let mut rng = RngStream::with_salt(seed, StreamLabel::Init, 1000 + inst as u64);
        let h = 3 + rng.index(4); // 3..=6
        let l = 3 + rng.index(4); // 3..=6
        let c = 1 + rng.index(3); // 1..=3
        let i = 1 + rng.index(3); // kernels, 1..=3
        let j = 1 + rng.index(3); // maps, 1..=3
        let b = 1 + rng.index(2); // 1..=2
        let k = if rng.index(2) == 0 { 1 } else { 3 };
        let tau = (0.4 + 0.7 * rng.uniform()) as f32;
        let mut layer = TwtaConvLayer::new(i, k, k, c, j, &mut rng)?;
        let inputs = normal_tensor(vec![b, h, l, c], 1.0, &mut rng);
        let logits = normal_tensor(vec![i, j], 0.7, &mut rng);
        let mut grng = RngStream::with_salt(seed, StreamLabel::Gumbel, 1000 + inst as u64);
        let gumbels = gumbel_noise(vec![i, j], &mut grng);
        let sample = WinnerSample::from_parts(&logits, &gumbels, tau)?;
        let site = |what: &str, idx: usize| {
            format!(
                "conv instance {inst} (h={h} l={l} c={c} kernels={i} maps={j} k={k} b={b} \
                 tau={tau:.3}) {what}[{idx}]"
            )
        };

        let (y, cache) = layer.forward_train_batch(&inputs, &sample)?;
        let grads = layer.backward_batch(&cache, &y, 0.0)?;

        for idx in 0..layer.kernels().data().len() {
            let v = layer.kernels().data()[idx];
            let (vp, vm, denom) = steps(v, 0.05);
            layer.kernels_mut().data_mut()[idx] = vp;
            let lp = sum_squares_half(&layer.forward_train_batch(&inputs, &sample)?.0);
            layer.kernels_mut().data_mut()[idx] = vm;
            let lm = sum_squares_half(&layer.forward_train_batch(&inputs, &sample)?.0);
            layer.kernels_mut().data_mut()[idx] = v;
            summary.record(
                grads.kernels.data()[idx] as f64,
                (lp - lm) / denom,
                &site("kernels", idx),
            )?;
        }

        for idx in 0..logits.data().len() {
            let v = logits.data()[idx];
            let (vp, vm, denom) = steps(v, 5e-3);
            let mut lp_t = logits.clone();
            lp_t.data_mut()[idx] = vp;
            let sp = WinnerSample::from_parts(&lp_t, &gumbels, tau)?;
            let lp = sum_squares_half(&layer.forward_train_batch(&inputs, &sp)?.0);
            let mut lm_t = logits.clone();
            lm_t.data_mut()[idx] = vm;
            let sm = WinnerSample::from_parts(&lm_t, &gumbels, tau)?;
            let lm = sum_squares_half(&layer.forward_train_batch(&inputs, &sm)?.0);
            summary.record(
                grads.logits.data()[idx] as f64,
                (lp - lm) / denom,
                &site("logits", idx),
            )?;
        }

        let mut probe = inputs.clone();
        for idx in 0..probe.data().len() {
            let v = probe.data()[idx];
            let (vp, vm, denom) = steps(v, 0.05);
            probe.data_mut()[idx] = vp;
            let lp = sum_squares_half(&layer.forward_train_batch(&probe, &sample)?.0);
            probe.data_mut()[idx] = vm;
            let lm = sum_squares_half(&layer.forward_train_batch(&probe, &sample)?.0);
            probe.data_mut()[idx] = v;
            summary.record(
                grads.input.data()[idx] as f64,
                (lp - lm) / denom,
                &site("input", idx),
            )?;
        }
        summary.instances += 1;
    }
    Ok(summary)
}

fn set_trainable_entry(
    model: &mut Model,
    task: usize,
    name: &str,
    idx: usize,
    value: f32,
) -> Result<f32> {
    let mut old = None;
    model.visit_trainable_mut(task, &mut |n, t| {
        if n == name {
            old = Some(t.data()[idx]);
            t.data_mut()[idx] = value;
        }
        Ok(())
    })?;
    old.ok_or_else(|| Error::Contract(format!("no trainable tensor named {name}")))
}

/// End-to-end check: a small two-block network under cross-entropy, every
/// trainable tensor (weights, task logits, head) perturbed entry-by-entry.
pub fn check_model_instance(seed: u64) -> Result<GradCheckSummary> {
    let spec = ModelSpec {
        input_shape: vec![5],
        layers: vec![
            LayerSpec::TwtaDense {
                in_dim: 5,
                blocks: 2,
                units: 3,
            },
            LayerSpec::Head { classes: 3 },
        ],
        total_classes: 3,
    };
    let mut rng = RngStream::with_salt(seed, StreamLabel::Init, 0);
    let mut model = build_model(&spec, &mut rng)?;
    model.register_task(0, &mut rng)?;

    let batch = normal_tensor(vec![4, 5], 1.0, &mut rng);
    let labels: Vec<usize> = (0..4).map(|_| rng.index(3)).collect();
    let tau = 0.7f32;
    let mut grng = RngStream::with_salt(seed, StreamLabel::Gumbel, 0);
    let gumbels = vec![gumbel_noise(vec![2, 3], &mut grng)];

    let (logits, cache) = model.forward_train_with_gumbels(&batch, 0, tau, &gumbels)?;
    let (_, d_logits) = cross_entropy(&logits, &labels)?;
    let grads = model.backward(&cache, &d_logits, 0.0)?;

    let mut summary = GradCheckSummary::empty();
    let named: Vec<(String, usize)> = grads
        .iter()
        .map(|(n, g)| (n.to_string(), g.data().len()))
        .collect();
    for (name, len) in named {
        let h_base = 1e-3; // cross-entropy is curved everywhere
        for idx in 0..len {
            let v = set_trainable_entry(&mut model, 0, &name, idx, 0.0)?;
            let (vp, vm, denom) = steps(v, h_base);
            set_trainable_entry(&mut model, 0, &name, idx, vp)?;
            let (out_p, _) = model.forward_train_with_gumbels(&batch, 0, tau, &gumbels)?;
            let (lp, _) = cross_entropy(&out_p, &labels)?;
            set_trainable_entry(&mut model, 0, &name, idx, vm)?;
            let (out_m, _) = model.forward_train_with_gumbels(&batch, 0, tau, &gumbels)?;
            let (lm, _) = cross_entropy(&out_m, &labels)?;
            set_trainable_entry(&mut model, 0, &name, idx, v)?;
            let analytic = grads
                .get(&name)
                .expect("gradient present by construction")
                .data()[idx] as f64;
            summary.record(analytic, (lp - lm) / denom, &format!("model {name}[{idx}]"))?;
        }
    }
    summary.instances = 1;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_dense_instances_stay_within_tolerance() {
        let s = check_dense_instances(20, 17).unwrap();
        assert_eq!(s.instances, 20);
        assert!(s.checks > 500, "only {} checks ran", s.checks);
        assert!(s.max_rel_error <= 1e-3, "worst {}: {}", s.worst, s.max_rel_error);
    }

    #[test]
    fn conv_instances_stay_within_tolerance() {
        let s = check_conv_instances(8, 19).unwrap();
        assert_eq!(s.instances, 8);
        assert!(s.checks > 200, "only {} checks ran", s.checks);
        assert!(s.max_rel_error <= 1e-3, "worst {}: {}", s.worst, s.max_rel_error);
    }

    #[test]
    fn full_model_cross_entropy_gradients_check_out() {
        let s = check_model_instance(23).unwrap();
        // dense 30 weights + 6 logits + 18 head weights + 3 bias entries.
        assert_eq!(s.checks, 57);
        assert!(s.max_rel_error <= 1e-3, "worst {}: {}", s.worst, s.max_rel_error);
    }

    #[test]
    fn summaries_are_deterministic_per_seed() {
        let a = check_dense_instances(5, 29).unwrap();
        let b = check_dense_instances(5, 29).unwrap();
        assert_eq!(a, b);
        let c = check_dense_instances(5, 31).unwrap();
        assert_ne!(a.max_rel_error.to_bits(), c.max_rel_error.to_bits());
    }

    #[test]
    fn tolerance_gate_rejects_disagreement() {
        let mut s = GradCheckSummary::empty();
        assert!(s.record(1.0, 1.0005, "close enough").is_ok());
        let err = s.record(1.0, 1.01, "way off").unwrap_err();
        assert!(err.to_string().contains("way off"));
    }
}
