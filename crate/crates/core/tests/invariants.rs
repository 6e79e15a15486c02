//! Property-based invariants over randomly generated architectures,
//! samples, and schedules.

use proptest::prelude::*;
use twta_core::evaluation::{
    flops_estimate, winner_overlap, FlopsMode, PrunedModel,
};
use twta_core::network::{
    build_model, count_retained_fraction, LayerSpec, ModelSpec,
};
use twta_core::numerics::{RngStream, StreamLabel, Tensor};
use twta_core::training::cross_entropy;
use twta_core::twta::{sample_relaxed_winners, DiscreteMask};
use twta_core::training::{lr_schedule, tau_schedule};

/// Random MLP spec with a consistent width chain.
fn mlp_spec_strategy() -> impl Strategy<Value = ModelSpec> {
    (
        2usize..=6,                                  // input dim
        prop::collection::vec((1usize..=4, 1usize..=4), 1..=3), // (blocks, units)*
        2usize..=5,                                  // classes
    )
        .prop_map(|(input, stack, classes)| {
            let mut layers = Vec::new();
            let mut width = input;
            for (blocks, units) in stack {
                layers.push(LayerSpec::TwtaDense {
                    in_dim: width,
                    blocks,
                    units,
                });
                width = blocks * units;
            }
            layers.push(LayerSpec::Head { classes });
            ModelSpec {
                input_shape: vec![input],
                layers,
                total_classes: classes,
            }
        })
}

fn random_batch(n: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed, StreamLabel::Init);
    Tensor::from_vec(
        vec![n, dim],
        (0..n * dim).map(|_| rng.normal() as f32).collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Shape algebra is sound: a spec that validates also runs, and its
    /// output width is the declared class count.
    #[test]
    fn valid_specs_validate_and_forward(spec in mlp_spec_strategy(), seed in 0u64..1_000) {
        let shapes = spec.validate().unwrap();
        prop_assert_eq!(shapes.len(), spec.layers.len());
        let mut rng = RngStream::with_salt(seed, StreamLabel::Init, 0);
        let mut model = build_model(&spec, &mut rng).unwrap();
        model.register_task(0, &mut rng).unwrap();
        let batch = random_batch(2, spec.input_shape[0], seed ^ 0xabc);
        let out = model.forward_eval_batch(&batch, 0).unwrap();
        prop_assert_eq!(out.shape(), &[2, spec.total_classes]);

        // Train-mode forward under the one-hot winner sample agrees with
        // eval bitwise: competition is the only difference between modes.
        let samples = model.one_hot_samples(0).unwrap();
        let (train_out, _) = model
            .forward_train_with_samples(&batch, 0, &samples)
            .unwrap();
        for (a, b) in out.data().iter().zip(train_out.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    /// Breaking the width chain anywhere is caught by validation.
    #[test]
    fn corrupted_chains_are_rejected(spec in mlp_spec_strategy(), bump in 1usize..=3) {
        let mut broken = spec.clone();
        if let LayerSpec::TwtaDense { in_dim, .. } = &mut broken.layers[0] {
            *in_dim += bump;
        }
        prop_assert!(broken.validate().is_err());

        let mut headless = spec;
        headless.layers.pop();
        prop_assert!(headless.validate().is_err());
    }

    /// Relaxed winner samples always lie on the per-block simplex.
    #[test]
    fn samples_lie_on_the_simplex(
        blocks in 1usize..=8,
        units in 1usize..=8,
        scale in 0.1f64..5.0,
        tau in 0.05f32..4.0,
        seed in 0u64..1_000,
    ) {
        let mut rng = RngStream::with_salt(seed, StreamLabel::Init, 7);
        let logits = Tensor::from_vec(
            vec![blocks, units],
            (0..blocks * units).map(|_| (rng.normal() * scale) as f32).collect(),
        ).unwrap();
        let mut grng = RngStream::with_salt(seed, StreamLabel::Gumbel, 7);
        let sample = sample_relaxed_winners(&logits, tau, &mut grng).unwrap();
        let xi = sample.xi_hat();
        for b in 0..blocks {
            let row = &xi.data()[b * units..(b + 1) * units];
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6, "block {} sums to {}", b, sum);
            for &v in row {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    /// Training per example is never cheaper than pruned inference, and
    /// with no competition (J = 1) it costs exactly 3 forwards.
    #[test]
    fn train_flops_dominate_eval(spec in mlp_spec_strategy(), masked in proptest::bool::ANY) {
        let eps_g = if masked { 1e-3 } else { 0.0 };
        let eval = flops_estimate(&spec, FlopsMode::Eval).unwrap();
        let train = flops_estimate(&spec, FlopsMode::Train { eps_g }).unwrap();
        prop_assert!(train >= eval);

        let degenerate = ModelSpec {
            input_shape: spec.input_shape.clone(),
            layers: spec
                .layers
                .iter()
                .map(|l| match *l {
                    // Same widths, no competition: every block keeps its
                    // single unit.
                    LayerSpec::TwtaDense { in_dim, blocks, units } => LayerSpec::TwtaDense {
                        in_dim,
                        blocks: blocks * units,
                        units: 1,
                    },
                    ref other => other.clone(),
                })
                .collect(),
            total_classes: spec.total_classes,
        };
        let e1 = flops_estimate(&degenerate, FlopsMode::Eval).unwrap();
        let t1 = flops_estimate(&degenerate, FlopsMode::Train { eps_g }).unwrap();
        prop_assert_eq!(t1, 3 * e1);
    }

    /// A fixed-width layer split into deeper competition gets cheaper at
    /// inference, with the retained fraction exactly 1/J.
    #[test]
    fn deeper_competition_prunes_more(
        input in 2usize..=16,
        width_log2 in 2u32..=5,
        classes in 2usize..=4,
    ) {
        let width = 1usize << width_log2; // 4..=32
        let mut last_eval = u64::MAX;
        for j_log2 in 0..=width_log2 {
            let units = 1usize << j_log2;
            let spec = ModelSpec {
                input_shape: vec![input],
                layers: vec![
                    LayerSpec::TwtaDense {
                        in_dim: input,
                        blocks: width / units,
                        units,
                    },
                    LayerSpec::Head { classes },
                ],
                total_classes: classes,
            };
            let eval = flops_estimate(&spec, FlopsMode::Eval).unwrap();
            prop_assert!(eval < last_eval || units == 1,
                "eval FLOPs failed to drop at J={}", units);
            last_eval = eval;
            let frac = count_retained_fraction(&spec).unwrap();
            prop_assert_eq!(frac, 1.0 / units as f64);
        }
    }

    /// Overlap is a percentage, symmetric, and 100 against itself.
    #[test]
    fn overlap_bounds_and_symmetry(
        arch in prop::collection::vec((1usize..=6, 1usize..=5), 1..=3),
        seed in 0u64..1_000,
    ) {
        let mut rng = RngStream::with_salt(seed, StreamLabel::Init, 11);
        let draw = |rng: &mut RngStream| -> Vec<DiscreteMask> {
            arch.iter()
                .map(|&(blocks, units)| {
                    DiscreteMask::new((0..blocks).map(|_| rng.index(units)).collect())
                })
                .collect()
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let ab = winner_overlap(&a, &b).unwrap();
        let ba = winner_overlap(&b, &a).unwrap();
        prop_assert!((0.0..=100.0).contains(&ab));
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(winner_overlap(&a, &a).unwrap(), 100.0);
    }

    /// Winner-pruned inference is bit-identical to the full model across
    /// random architectures, tasks, and inputs.
    #[test]
    fn pruned_model_always_matches_full_eval(
        spec in mlp_spec_strategy(),
        tasks in 1usize..=3,
        seed in 0u64..1_000,
    ) {
        let mut rng = RngStream::with_salt(seed, StreamLabel::Init, 0);
        let mut model = build_model(&spec, &mut rng).unwrap();
        for t in 0..tasks {
            let mut tr = RngStream::with_salt(seed, StreamLabel::Init, 1 + t as u64);
            model.register_task(t, &mut tr).unwrap();
        }
        let batch = random_batch(3, spec.input_shape[0], seed ^ 0x51);
        for t in 0..tasks {
            let full = model.forward_eval_batch(&batch, t).unwrap();
            let pruned = PrunedModel::from_model(&model, t).unwrap();
            let lean = pruned.forward_batch(&batch).unwrap();
            for (a, b) in full.data().iter().zip(lean.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    /// Cross-entropy gradients are a probability-mass shift: rows sum to
    /// zero, the label entry is negative, everything else nonnegative.
    #[test]
    fn cross_entropy_gradient_shifts_mass(
        rows in 1usize..=5,
        classes in 2usize..=6,
        seed in 0u64..1_000,
    ) {
        let mut rng = RngStream::with_salt(seed, StreamLabel::Init, 13);
        let logits = Tensor::from_vec(
            vec![rows, classes],
            (0..rows * classes).map(|_| (rng.normal() * 2.0) as f32).collect(),
        ).unwrap();
        let labels: Vec<usize> = (0..rows).map(|_| rng.index(classes)).collect();
        let (loss, grad) = cross_entropy(&logits, &labels).unwrap();
        prop_assert!(loss.is_finite() && loss >= 0.0);
        for r in 0..rows {
            let row = &grad.data()[r * classes..(r + 1) * classes];
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!(sum.abs() <= 1e-6, "row {} sums to {}", r, sum);
            prop_assert!(row[labels[r]] <= 0.0);
            for (k, &v) in row.iter().enumerate() {
                if k != labels[r] {
                    prop_assert!(v >= 0.0);
                }
            }
        }
    }

    /// Both schedules anneal monotonically between their pinned endpoints.
    #[test]
    fn schedules_anneal_monotonically(
        total in 1usize..=200,
        lr0 in 1e-4f32..1.0,
        tau_end in 0.01f32..0.5,
        tau_spread in 0.0f32..2.0,
    ) {
        let tau0 = tau_end + tau_spread;
        prop_assert_eq!(lr_schedule(0, total, lr0), lr0);
        prop_assert_eq!(lr_schedule(total, total, lr0), 0.0);
        prop_assert_eq!(tau_schedule(0, total, tau0, tau_end), tau0);
        let mut last_lr = f32::INFINITY;
        let mut last_tau = f32::INFINITY;
        for u in 0..=total {
            let lr = lr_schedule(u, total, lr0);
            let tau = tau_schedule(u, total, tau0, tau_end);
            prop_assert!(lr <= last_lr && lr >= 0.0);
            prop_assert!(tau <= last_tau && tau >= tau_end);
            last_lr = lr;
            last_tau = tau;
        }
        prop_assert!((tau_schedule(total, total, tau0, tau_end) - tau_end).abs() <= 1e-6);
    }
}
