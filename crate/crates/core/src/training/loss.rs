//! Cross-entropy over a head whose unseen classes are masked out.
//!
//! Class-incremental runs size the head for all classes up front; classes
//! not yet introduced are set to negative infinity before the softmax, which
//! gives them exactly zero probability and exactly zero gradient.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Copy of `logits` with every class whose `seen` flag is false replaced by
/// negative infinity.
pub fn mask_unseen(logits: &Tensor, seen: &[bool]) -> Result<Tensor> {
    if logits.ndim() != 2 || logits.shape()[1] != seen.len() {
        return Err(Error::ShapeMismatch {
            op: "mask_unseen",
            left: logits.shape().to_vec(),
            right: vec![seen.len()],
        });
    }
    let classes = seen.len();
    let mut out = logits.clone();
    for row in 0..logits.shape()[0] {
        for (k, &is_seen) in seen.iter().enumerate() {
            if !is_seen {
                out.data_mut()[row * classes + k] = f32::NEG_INFINITY;
            }
        }
    }
    Ok(out)
}

/// Mean cross-entropy over the batch plus its logit gradient
/// `(softmax - onehot) / B`. Masked (-inf) classes carry zero probability
/// and zero gradient; a label pointing at a masked class is an error.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let (bsz, classes) = (logits.shape()[0], logits.shape()[1]);
    let mut d_logits = Tensor::zeros(vec![bsz, classes]);
    let mut loss = 0.0f64;
    let mut probs = vec![0.0f64; classes];
    for b in 0..bsz {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let label = labels[b];
        let seen = row.iter().filter(|v| v.is_finite()).count();
        if label >= classes || !row[label].is_finite() {
            return Err(Error::LabelOutOfRange { label, seen });
        }
        let max = row
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for k in 0..classes {
            // exp(-inf - max) is exactly 0, so masked classes vanish here.
            probs[k] = ((row[k] as f64) - max).exp();
            sum += probs[k];
        }
        loss += -((row[label] as f64 - max) - sum.ln());
        for k in 0..classes {
            let p = probs[k] / sum;
            let target = (k == label) as u8 as f64;
            d_logits.data_mut()[b * classes + k] = ((p - target) / bsz as f64) as f32;
        }
    }
    Ok((loss / bsz as f64, d_logits))
}
