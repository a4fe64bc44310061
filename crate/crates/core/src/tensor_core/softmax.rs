//! Softmax over the last axis and the cross-entropy loss on probabilities.

use super::Tensor;
use crate::{Error, Result};

/// Lower clamp applied to probabilities before taking the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Softmax along the last axis, computed after subtracting the row maximum.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = *logits.shape().last().unwrap_or(&1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Given softmax outputs `probs` and upstream `grad`, the gradient with respect
/// to the logits: `p ⊙ (g - Σ g⊙p)` per row.
pub fn softmax_backward(probs: &Tensor, grad: &Tensor) -> Tensor {
    let k = *probs.shape().last().unwrap_or(&1);
    let mut out = Tensor::zeros(probs.shape());
    for ((o, p), g) in out
        .data_mut()
        .chunks_mut(k)
        .zip(probs.data().chunks(k))
        .zip(grad.data().chunks(k))
    {
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, &p), &g) in o.iter_mut().zip(p).zip(g) {
            *o = p * (g - inner);
        }
    }
    out
}

fn check_probs(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let &[batch, classes] = probs.shape() else {
        return Err(Error::shape("cross_entropy", format!("expected [B, K], got {:?}", probs.shape())));
    };
    if labels.len() != batch {
        return Err(Error::shape(
            "cross_entropy",
            format!("{batch} rows but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    for r in 0..batch {
        let total: f64 = probs.row(r).iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "probability row {r} sums to {total}"
            )));
        }
    }
    Ok((batch, classes))
}

/// Mean negative log-likelihood of `labels` under row-wise distributions `probs`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (batch, _) = check_probs(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| -probs.row(r)[l].max(LOG_CLAMP).ln())
        .sum();
    Ok(total / batch as f64)
}

/// Gradient of [`cross_entropy`] with respect to `probs`. Entries below the
/// clamp receive zero gradient, matching the flat clamped region.
pub fn cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (batch, classes) = check_probs(probs, labels)?;
    let mut grad = Tensor::zeros(probs.shape());
    for (r, &l) in labels.iter().enumerate() {
        let p = probs.row(r)[l];
        if p > LOG_CLAMP {
            grad.data_mut()[r * classes + l] = -1.0 / (batch as f64 * p);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits() {
        let p = softmax(&Tensor::full(&[4], 3.0));
        assert_eq!(p.data(), &[0.25; 4]);
    }

    #[test]
    fn shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[3, 5], 4.0, &mut rng);
        let a = softmax(&x);
        let b = softmax(&x.map(|v| v + 17.25));
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform(&[2, 6], 3.0, &mut rng);
        let p = softmax(&x);
        for r in 0..2 {
            let total: f64 = x.row(r).iter().map(|v| v.exp()).sum();
            for (j, v) in x.row(r).iter().enumerate() {
                assert!((p.row(r)[j] - v.exp() / total).abs() < 1e-15);
            }
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn confident_correct_prediction_costs_nothing() {
        let p = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert!(cross_entropy(&p, &[1]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn uniform_probs_cost_ln_k() {
        let p = Tensor::full(&[2, 5], 0.2);
        let loss = cross_entropy(&p, &[0, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_per_sample_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = softmax(&Tensor::uniform(&[4, 3], 2.0, &mut rng));
        let labels = [2, 0, 1, 1];
        let mut expected = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            expected -= p.row(r)[l].ln();
        }
        expected /= 4.0;
        assert!((cross_entropy(&p, &labels).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn label_out_of_range() {
        let p = Tensor::full(&[1, 2], 0.5);
        assert!(matches!(cross_entropy(&p, &[2]), Err(Error::InvalidArgument(_))));
    }
}
