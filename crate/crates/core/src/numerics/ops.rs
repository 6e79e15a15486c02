//! Dense linear algebra, direct 2-D convolution, softmax, initializers.
//!
//! Every reduction accumulates in f64 and rounds to f32 exactly once on
//! store. Loop orders are part of the contract: the pruned-model forward
//! reproduces full-model logits bit for bit only because both paths add the
//! same products in the same order.

use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Inner product over `len` elements with f64 accumulation; `bs` is the
/// element stride of `b`. The shared kernel for matmul and the pruned path.
#[inline]
pub(crate) fn dot_strided(a: &[f32], b: &[f32], bs: usize, len: usize) -> f32 {
    let mut acc = 0.0f64;
    for k in 0..len {
        acc += a[k] as f64 * b[k * bs] as f64;
    }
    acc as f32
}

/// C\[m]\[n] = sum_k A\[m]\[k] * B\[k]\[n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, ka], &[kb, n]) = (a.shape(), b.shape()) else {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    };
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &ad[i * ka..(i + 1) * ka];
        for j in 0..n {
            out[i * n + j] = dot_strided(row, &bd[j..], n, ka);
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// Validates odd kernel dims with matching half-width padding.
pub fn check_conv_geometry(kh: usize, kl: usize, pad: usize) -> Result<()> {
    if kh % 2 == 0 || kl % 2 == 0 {
        return Err(Error::Geometry(format!(
            "even kernel dims {kh}x{kl}; same-padding convolution needs odd dims"
        )));
    }
    if pad != kh / 2 || pad != kl / 2 {
        return Err(Error::Geometry(format!(
            "pad {pad} must equal floor({kh}/2) and floor({kl}/2)"
        )));
    }
    Ok(())
}

/// Same-padded direct convolution.
///
/// input: \[H, L, C], kernel: \[h, l, C, J], output: \[H, L, J]. Zero padding,
/// accumulation order (dy, dx, c) ascending per output element.
pub fn conv2d_same(input: &Tensor, kernel: &Tensor, pad: usize) -> Result<Tensor> {
    let (&[ih, il, ic], &[kh, kl, kc, j]) = (input.shape(), kernel.shape()) else {
        return Err(Error::ShapeMismatch {
            op: "conv2d_same",
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    };
    check_conv_geometry(kh, kl, pad)?;
    if ic != kc {
        return Err(Error::ShapeMismatch {
            op: "conv2d_same",
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(vec![ih, il, j]);
    for y in 0..ih {
        for x in 0..il {
            for m in 0..j {
                out.data_mut()[(y * il + x) * j + m] =
                    conv_output_at(input.data(), kernel.data(), (ih, il, ic), (kh, kl, j), y, x, m, pad);
            }
        }
    }
    Ok(out)
}

/// One output element of the same-padded convolution; shared with the pruned
/// path (J = 1 there), which is what keeps the two paths bit-identical.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_output_at(
    input: &[f32],
    kernel: &[f32],
    (ih, il, ic): (usize, usize, usize),
    (kh, kl, kj): (usize, usize, usize),
    y: usize,
    x: usize,
    m: usize,
    pad: usize,
) -> f32 {
    let mut acc = 0.0f64;
    for dy in 0..kh {
        let sy = y + dy;
        if sy < pad || sy >= ih + pad {
            continue;
        }
        let sy = sy - pad;
        for dx in 0..kl {
            let sx = x + dx;
            if sx < pad || sx >= il + pad {
                continue;
            }
            let sx = sx - pad;
            let in_base = (sy * il + sx) * ic;
            let k_base = (dy * kl + dx) * ic;
            for c in 0..ic {
                acc += input[in_base + c] as f64 * kernel[(k_base + c) * kj + m] as f64;
            }
        }
    }
    acc as f32
}

/// Max-shifted softmax over a slice, computed in f64.
pub fn softmax_slice(src: &[f32], dst: &mut [f32]) {
    debug_assert_eq!(src.len(), dst.len());
    let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut sum = 0.0f64;
    let mut exps = vec![0.0f64; src.len()];
    for (e, &v) in exps.iter_mut().zip(src) {
        *e = ((v as f64) - max).exp();
        sum += *e;
    }
    for (d, e) in dst.iter_mut().zip(&exps) {
        *d = (*e / sum) as f32;
    }
}

/// Softmax of a 1-D tensor.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.ndim() != 1 {
        return Err(Error::ShapeMismatch {
            op: "softmax",
            left: v.shape().to_vec(),
            right: vec![v.len()],
        });
    }
    let mut out = Tensor::zeros(vec![v.len()]);
    softmax_slice(v.data(), out.data_mut());
    Ok(out)
}

/// Glorot-normal initialization: i.i.d. N(0, 2 / (fan_in + fan_out)).
pub fn glorot_normal(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Param(format!(
            "glorot fans must be positive, got ({fan_in}, {fan_out})"
        )));
    }
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| (rng.normal() * std) as f32).collect();
    Tensor::from_vec(shape, data)
}

/// Clamp for the uniform draw inside Gumbel noise; -log(-log u) is singular
/// at u in {0, 1}.
pub const GUMBEL_UNIFORM_EPS: f64 = 1e-12;

/// Standard Gumbel noise: g = -log(-log u), u ~ Uniform(0,1) clamped open.
pub fn gumbel_noise(shape: Vec<usize>, rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let u = rng.uniform_open(GUMBEL_UNIFORM_EPS);
            (-(-u.ln()).ln()) as f32
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product invariant")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::StreamLabel;

    fn rand_tensor(shape: Vec<usize>, rng: &mut RngStream) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal() as f32).collect()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let b = Tensor::from_vec(vec![3, 2], (1..=6).map(|v| v as f32).collect()).unwrap();
        let c = matmul(&eye, &b).unwrap();
        assert_eq!(c.data(), b.data());
    }

    #[test]
    fn matmul_hand_sum() {
        let a = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data()[0], 11.0);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = RngStream::new(42, StreamLabel::Init);
        let a = rand_tensor(vec![7, 5], &mut rng);
        let b = rand_tensor(vec![5, 4], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for m in 0..7 {
            for n in 0..4 {
                let mut want = 0.0f64;
                for k in 0..5 {
                    want += a.at(&[m, k]) as f64 * b.at(&[k, n]) as f64;
                }
                let got = c.at(&[m, n]) as f64;
                let rel = (got - want).abs() / want.abs().max(1e-9);
                assert!(rel <= 1e-6, "({m},{n}): got {got}, want {want}");
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = RngStream::new(1, StreamLabel::Init);
        let input = rand_tensor(vec![4, 5, 1], &mut rng);
        let kernel = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let out = conv2d_same(&input, &kernel, 0).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv_zero_input() {
        let input = Tensor::zeros(vec![5, 5, 2]);
        let kernel = Tensor::filled(vec![3, 3, 2, 4], 0.7);
        let out = conv2d_same(&input, &kernel, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_quintuple_loop_oracle() {
        let mut rng = RngStream::new(77, StreamLabel::Init);
        let input = rand_tensor(vec![6, 6, 2], &mut rng);
        let kernel = rand_tensor(vec![3, 3, 2, 2], &mut rng);
        let out = conv2d_same(&input, &kernel, 1).unwrap();
        // Independent oracle: explicit zero-padded loops.
        for y in 0..6usize {
            for x in 0..6usize {
                for j in 0..2usize {
                    let mut want = 0.0f64;
                    for dy in 0..3usize {
                        for dx in 0..3usize {
                            for c in 0..2usize {
                                let sy = y as isize + dy as isize - 1;
                                let sx = x as isize + dx as isize - 1;
                                if sy < 0 || sy >= 6 || sx < 0 || sx >= 6 {
                                    continue;
                                }
                                want += input.at(&[sy as usize, sx as usize, c]) as f64
                                    * kernel.at(&[dy, dx, c, j]) as f64;
                            }
                        }
                    }
                    let got = out.at(&[y, x, j]) as f64;
                    assert!(
                        (got - want).abs() <= 1e-5,
                        "({y},{x},{j}): got {got}, want {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let input = Tensor::zeros(vec![4, 4, 1]);
        let kernel = Tensor::zeros(vec![2, 2, 1, 1]);
        assert!(matches!(
            conv2d_same(&input, &kernel, 1),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn softmax_symmetry() {
        let v = Tensor::zeros(vec![3]);
        let s = softmax(&v).unwrap();
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_max_shift_no_overflow() {
        let v = Tensor::from_vec(vec![2], vec![1000.0, 0.0]).unwrap();
        let s = softmax(&v).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6);
        assert!(s.data()[1].abs() < 1e-6);
        assert!(s.all_finite());
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        let v = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = softmax(&v).unwrap();
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        for (got, want) in s.data().iter().zip(exps.iter().map(|e| e / z)) {
            assert!((*got as f64 - want).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_preserves_order() {
        let mut rng = RngStream::new(3, StreamLabel::Init);
        for _ in 0..50 {
            let v = rand_tensor(vec![8], &mut rng);
            let s = softmax(&v).unwrap();
            let sum: f64 = s.data().iter().map(|&p| p as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for a in 0..8 {
                for b in 0..8 {
                    if v.data()[a] < v.data()[b] {
                        assert!(s.data()[a] <= s.data()[b]);
                    }
                }
            }
        }
    }

    #[test]
    fn glorot_unit_std_for_unit_fans() {
        // fan_in = fan_out = 1 gives std = 1.
        let mut rng = RngStream::new(8, StreamLabel::Init);
        let t = glorot_normal(vec![100_000], 1, 1, &mut rng).unwrap();
        let mean: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
        let var: f64 =
            t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / t.len() as f64;
        assert!((var.sqrt() - 1.0).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn glorot_moment_estimate() {
        let mut rng = RngStream::new(9, StreamLabel::Init);
        let t = glorot_normal(vec![100_000], 100, 100, &mut rng).unwrap();
        let var: f64 = t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / t.len() as f64;
        let std = var.sqrt();
        assert!((std - 0.1).abs() < 0.005, "std {std} expected ~0.1");
    }

    #[test]
    fn glorot_deterministic_and_rejects_zero_fans() {
        let a = glorot_normal(vec![4, 4], 4, 4, &mut RngStream::new(5, StreamLabel::Init)).unwrap();
        let b = glorot_normal(vec![4, 4], 4, 4, &mut RngStream::new(5, StreamLabel::Init)).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(glorot_normal(vec![2], 0, 1, &mut RngStream::new(5, StreamLabel::Init)).is_err());
    }

    #[test]
    fn gumbel_fixed_point() {
        // u = 1/e gives g = -log(-log(1/e)) = -log(1) = 0.
        let u = 1.0f64 / std::f64::consts::E;
        let g = -(-u.ln()).ln();
        assert!(g.abs() < 1e-12);
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let mut rng = RngStream::new(11, StreamLabel::Gumbel);
        let t = gumbel_noise(vec![100_000], &mut rng);
        let mean: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
        assert!((mean - 0.5772).abs() < 0.02, "gumbel mean {mean}");
    }

    #[test]
    fn gumbel_finite_under_clamp() {
        // Clamp contract: even at the clamp bounds the formula stays finite.
        for u in [GUMBEL_UNIFORM_EPS, 1.0 - GUMBEL_UNIFORM_EPS] {
            let g = -(-u.ln()).ln();
            assert!(g.is_finite());
        }
        let mut rng = RngStream::new(12, StreamLabel::Gumbel);
        assert!(gumbel_noise(vec![10_000], &mut rng).all_finite());
    }
}
