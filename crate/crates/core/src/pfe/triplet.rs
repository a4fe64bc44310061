//! Batch-all triplet loss averaged over the active (nonzero) triplets.

use crate::tensor_core::Tensor;
use crate::{Error, Result};

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    /// Gradient with respect to the `[N, bins, d]` feature tensor.
    pub grad: Tensor,
    /// Triplets (over all bins) with a positive hinge.
    pub active: usize,
    pub total: usize,
}

struct Dims {
    samples: usize,
    bins: usize,
    dim: usize,
}

fn dims(features: &Tensor, labels: &[usize]) -> Result<Dims> {
    let &[samples, bins, dim] = features.shape() else {
        return Err(Error::shape("triplet_loss", format!("expected [N, bins, d], got {:?}", features.shape())));
    };
    if labels.len() != samples {
        return Err(Error::shape("triplet_loss", format!("{samples} samples, {} labels", labels.len())));
    }
    let has_positive = (0..samples).any(|a| (0..samples).any(|p| p != a && labels[p] == labels[a]));
    let has_negative = labels.iter().any(|&l| l != labels[0]);
    if !has_positive || !has_negative {
        return Err(Error::Degenerate(
            "triplet batch needs two identities and a repeated identity".into(),
        ));
    }
    Ok(Dims { samples, bins, dim })
}

/// Batch-all triplet loss over every bin with Euclidean distances.
///
/// The hinge `max(0, margin + d(a,p) - d(a,n))` is summed over every
/// (anchor, positive, negative, bin) combination and divided by the number of
/// combinations whose hinge is positive. A batch with no active triplet has
/// loss zero.
pub fn triplet_loss_ba(features: &Tensor, labels: &[usize], margin: f64) -> Result<TripletLoss> {
    let Dims { samples, bins, dim } = dims(features, labels)?;
    let x = features.data();
    let at = |s: usize, b: usize| &x[(s * bins + b) * dim..(s * bins + b + 1) * dim];

    // dist[b][i][j]
    let mut dist = vec![0.0; bins * samples * samples];
    for b in 0..bins {
        for i in 0..samples {
            for j in i + 1..samples {
                let d = at(i, b)
                    .iter()
                    .zip(at(j, b))
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum::<f64>()
                    .sqrt();
                dist[(b * samples + i) * samples + j] = d;
                dist[(b * samples + j) * samples + i] = d;
            }
        }
    }
    let d = |b: usize, i: usize, j: usize| dist[(b * samples + i) * samples + j];

    let mut sum = 0.0;
    let mut active = Vec::new();
    let mut total = 0;
    for b in 0..bins {
        for a in 0..samples {
            for p in (0..samples).filter(|&p| p != a && labels[p] == labels[a]) {
                for n in (0..samples).filter(|&n| labels[n] != labels[a]) {
                    total += 1;
                    let gap = d(b, a, p) - d(b, a, n);
                    if margin + gap > 0.0 {
                        sum += gap;
                        active.push((b, a, p, n));
                    }
                }
            }
        }
    }

    let mut grad = Tensor::zeros(features.shape());
    if active.is_empty() {
        return Ok(TripletLoss { loss: 0.0, grad, active: 0, total });
    }
    let scale = 1.0 / active.len() as f64;
    let g = grad.data_mut();
    let mut add_unit = |b: usize, from: usize, to: usize, coeff: f64| {
        // coeff * d/d(from) ||from - to||, mirrored onto `to`
        let dd = d(b, from, to);
        if dd == 0.0 {
            return;
        }
        for k in 0..dim {
            let diff = (x[(from * bins + b) * dim + k] - x[(to * bins + b) * dim + k]) / dd;
            g[(from * bins + b) * dim + k] += coeff * diff;
            g[(to * bins + b) * dim + k] -= coeff * diff;
        }
    };
    for &(b, a, p, n) in &active {
        add_unit(b, a, p, scale);
        add_unit(b, a, n, -scale);
    }
    Ok(TripletLoss {
        loss: margin + sum * scale,
        grad,
        active: active.len(),
        total,
    })
}
