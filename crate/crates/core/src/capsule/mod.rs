//! Capsule block: a projection of the bin context into primary capsules,
//! prediction vectors `û = W u`, and routing-by-agreement into digit capsules.

pub mod ops;

pub use ops::{predictions, squash};

use crate::model::ParamBinder;
use crate::tensor_core::{conv2d, linear, softmax, Tape, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_ROUTING_ITERS: usize = 3;

/// Squashed `[C, D1]` capsules.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimaryCapsules {
    pub capsules: Tensor,
}

/// Squashed `[J, D2]` capsules.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitCapsules {
    pub capsules: Tensor,
}

impl DigitCapsules {
    /// Capsule lengths, one per output capsule.
    pub fn lengths(&self) -> Vec<f64> {
        let d = self.capsules.shape()[1];
        self.capsules
            .data()
            .chunks(d)
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    }
}

/// Routing logits `b` and couplings `c = softmax_J(b)` after the last update.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState {
    pub logits: Tensor,
    pub couplings: Tensor,
    pub iterations: usize,
}

fn project(flat: &Tensor, weight: &Tensor, bias: &Tensor, capsules: usize) -> Result<PrimaryCapsules> {
    let n = flat.len();
    let y = linear(&flat.clone().reshape(&[1, n])?, weight, bias)?;
    let out = y.len();
    if capsules == 0 || out % capsules != 0 {
        return Err(Error::shape("primary_caps", format!("{out} values into {capsules} capsules")));
    }
    let u = y.reshape(&[capsules, out / capsules])?;
    Ok(PrimaryCapsules { capsules: ops::squash_rows(&u) })
}

/// Flattens `context`, projects it to `C · D1` values with `weight: [N, C·D1]`
/// and `bias`, reshapes to `[C, D1]` and squashes every capsule.
pub fn primary_caps(context: &Tensor, weight: &Tensor, bias: &Tensor, capsules: usize) -> Result<PrimaryCapsules> {
    project(context, weight, bias, capsules)
}

/// `(rows, cols)` of the map each context row of `width` values is folded
/// into: the factorization with `rows ≤ cols` closest to a square.
pub fn fold_shape(width: usize) -> Result<(usize, usize)> {
    let rows = (1..=width).take_while(|r| r * r <= width).filter(|r| width % r == 0).last();
    match rows {
        Some(r) => Ok((r, width / r)),
        None => Err(Error::shape("primary_caps_conv", "empty context row")),
    }
}

/// Folds every row of `[bins, R]` into a [`fold_shape`] map, stacks the maps as
/// channels, applies `kernel: [K, bins, k, k]` (stride 1, no padding), then
/// projects like [`primary_caps`].
pub fn primary_caps_conv_variant(
    context: &Tensor,
    kernel: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    capsules: usize,
) -> Result<PrimaryCapsules> {
    let &[bins, width] = context.shape() else {
        return Err(Error::shape("primary_caps_conv", format!("expected [bins, R], got {:?}", context.shape())));
    };
    let (rows, cols) = fold_shape(width)?;
    let maps = context.clone().reshape(&[1, bins, rows, cols])?;
    let features = conv2d(&maps, kernel, 1, 0)?;
    project(&features, weight, bias, capsules)
}

/// Routing by agreement over predictions `û: [C, J, D2]`.
///
/// Starting from zero logits, every iteration computes `c = softmax_J(b)`,
/// `s_j = Σ_i c_ij û_{j|i}`, `v_j = squash(s_j)` and `b_ij += û_{j|i} · v_j`.
/// The returned state holds the final logits and their softmax.
pub fn dynamic_routing(uhat: &Tensor, iterations: usize) -> Result<(DigitCapsules, RoutingState)> {
    let &[c, j, _] = uhat.shape() else {
        return Err(Error::shape("dynamic_routing", format!("expected [C, J, D2], got {:?}", uhat.shape())));
    };
    if iterations == 0 {
        return Err(Error::InvalidArgument("routing needs at least one iteration".into()));
    }
    let mut logits = Tensor::zeros(&[c, j]);
    let mut v = None;
    for _ in 0..iterations {
        let couplings = softmax(&logits);
        let out = ops::squash_rows(&ops::route_sum(&couplings, uhat)?);
        logits.add_assign(&ops::agreement(uhat, &out)?)?;
        v = Some(out);
    }
    let v = v.expect("at least one iteration");
    v.ensure_finite("dynamic_routing")?;
    let couplings = softmax(&logits);
    Ok((
        DigitCapsules { capsules: v },
        RoutingState { logits, couplings, iterations },
    ))
}

/// Primary capsules on a tape from `context: [bins, R]`. With a conv kernel
/// path the context is folded into maps first.
pub fn primary_caps_tape<'p>(
    tape: &mut Tape<'p>,
    binder: &mut ParamBinder<'p>,
    context: Var,
    capsules: usize,
    conv: bool,
) -> Result<Var> {
    let flat = if conv {
        let &[bins, width] = tape.value(context).shape() else {
            return Err(Error::shape("primary_caps_conv", format!("{:?}", tape.value(context).shape())));
        };
        let (rows, cols) = fold_shape(width)?;
        let maps = tape.reshape(context, &[1, bins, rows, cols])?;
        let k = binder.var(tape, "caps.conv.kernel")?;
        let f = tape.conv2d(maps, k, 1, 0)?;
        let n = tape.value(f).len();
        tape.reshape(f, &[n])?
    } else {
        let n = tape.value(context).len();
        tape.reshape(context, &[n])?
    };
    let w = binder.var(tape, "caps.primary.weight")?;
    let b = binder.var(tape, "caps.primary.bias")?;
    let y = tape.linear(flat, w, b)?;
    let out = tape.value(y).len();
    let u = tape.reshape(y, &[capsules, out / capsules])?;
    Ok(tape.squash(u))
}

/// Predictions and routing on a tape; returns the digit capsules `[J, D2]`.
/// The loop is unrolled so gradients flow through every coupling update.
pub fn routing_tape<'p>(tape: &mut Tape<'p>, binder: &mut ParamBinder<'p>, primary: Var, iterations: usize) -> Result<Var> {
    let w = binder.var(tape, "caps.route.weight")?;
    let uhat = tape.predictions(primary, w)?;
    routing_on_tape(tape, uhat, iterations)
}

/// Unrolled routing of already-recorded predictions.
pub fn routing_on_tape(tape: &mut Tape<'_>, uhat: Var, iterations: usize) -> Result<Var> {
    let &[c, j, _] = tape.value(uhat).shape() else {
        return Err(Error::shape("routing", format!("{:?}", tape.value(uhat).shape())));
    };
    if iterations == 0 {
        return Err(Error::InvalidArgument("routing needs at least one iteration".into()));
    }
    let mut logits = tape.constant(Tensor::zeros(&[c, j]));
    let mut v = None;
    for it in 0..iterations {
        let couplings = tape.softmax(logits);
        let s = tape.route_sum(couplings, uhat)?;
        let out = tape.squash(s);
        // the last logit update cannot reach the output
        if it + 1 < iterations {
            let a = tape.agreement(uhat, out)?;
            logits = tape.add(logits, a)?;
        }
        v = Some(out);
    }
    Ok(v.expect("at least one iteration"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_output_capsule_takes_everything() {
        let uhat = rand(&[4, 1, 3], 1);
        for iters in 1..5 {
            let (v, state) = dynamic_routing(&uhat, iters).unwrap();
            assert!(state.couplings.data().iter().all(|&c| c == 1.0));
            let s: Vec<f64> = (0..3).map(|k| (0..4).map(|i| uhat.data()[i * 3 + k]).sum()).collect();
            assert_eq!(v.capsules.data(), squash(&s).as_slice());
        }
    }

    #[test]
    fn identical_predictions_keep_uniform_couplings() {
        let u = rand(&[3, 1, 4], 2);
        let uhat = Tensor::from_fn(&[3, 5, 4], |i| u.data()[(i / 20) * 4 + i % 4]);
        let (_, state) = dynamic_routing(&uhat, 3).unwrap();
        assert!(state.couplings.data().iter().all(|&c| c == 0.2));
    }

    #[test]
    fn one_iteration_is_uniform_average() {
        let uhat = rand(&[3, 2, 4], 3);
        let (v, _) = dynamic_routing(&uhat, 1).unwrap();
        for j in 0..2 {
            let s: Vec<f64> = (0..4)
                .map(|k| 0.5 * (0..3).map(|i| uhat.data()[(i * 2 + j) * 4 + k]).sum::<f64>())
                .collect();
            for (a, b) in v.capsules.row(j).iter().zip(squash(&s)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_routing_matches_pure() {
        let uhat = rand(&[4, 3, 2], 4);
        let (v, _) = dynamic_routing(&uhat, 3).unwrap();
        let mut tape = Tape::new();
        let u = tape.constant(uhat);
        let out = routing_on_tape(&mut tape, u, 3).unwrap();
        assert_eq!(tape.value(out), &v.capsules);
    }

    #[test]
    fn zero_projection_gives_zero_capsules() {
        let ctx = rand(&[31, 16], 5);
        let p = primary_caps(&ctx, &Tensor::zeros(&[496, 12]), &Tensor::zeros(&[12]), 3).unwrap();
        assert_eq!(p.capsules.shape(), &[3, 4]);
        assert!(p.capsules.data().iter().all(|&v| v == 0.0));
        let k = Tensor::zeros(&[2, 31, 3, 3]);
        let q = primary_caps_conv_variant(&ctx, &k, &Tensor::zeros(&[8, 12]), &Tensor::zeros(&[12]), 3).unwrap();
        assert!(q.capsules.data().iter().all(|&v| v == 0.0));
        assert_eq!(fold_shape(16).unwrap(), (4, 4));
        assert_eq!(fold_shape(512).unwrap(), (16, 32));
        assert_eq!(fold_shape(13).unwrap(), (1, 13));
        assert!(fold_shape(0).is_err());
    }
}
