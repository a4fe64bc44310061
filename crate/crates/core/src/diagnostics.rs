//! Finite-difference checks of every differentiable block and of the whole
//! model.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::capsule::routing_on_tape;
use crate::model::{forward_tape, Architecture, ParamBinder};
use crate::recurrent::{direction_specs, recurrent_tape};
use crate::tensor_core::gradcheck::{finite_diff_check_at, FnOp, DEFAULT_EPSILON};
use crate::tensor_core::tape::GruVars;
use crate::tensor_core::{cross_entropy, cross_entropy_backward, Tape, Tensor, Var};
use crate::training::Scale;
use crate::{ModelParams, Result};

/// Largest relative error a block may show.
pub const THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub block: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl BlockCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < THRESHOLD
    }
}

/// Up to `per_input` coordinates of every input, drawn without replacement.
fn coords(point: &[Tensor], per_input: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, t) in point.iter().enumerate() {
        let mut picked = index::sample(rng, t.len(), per_input.min(t.len())).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|c| (i, c)));
    }
    out
}

/// Checks `build` contracted with a fixed random direction over its output.
fn tape_block(
    block: &'static str,
    point: Vec<Tensor>,
    per_input: usize,
    rng: &mut ChaCha8Rng,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<BlockCheck> {
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Tensor::uniform(tape.value(out).shape(), 1.0, rng)
    };
    let op = FnOp {
        value: |p: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.input(t.clone())).collect();
            let out = build(&mut tape, &vars)?;
            Ok(tape.value(out).dot(&probe))
        },
        gradient: |p: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.input(t.clone())).collect();
            let out = build(&mut tape, &vars)?;
            let mut grads = tape.backward(out, probe.clone())?;
            Ok(vars
                .iter()
                .zip(p)
                .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect())
        },
    };
    let at = coords(&point, per_input, rng);
    let r = finite_diff_check_at(&op, &point, DEFAULT_EPSILON, &at)?;
    Ok(BlockCheck { block, max_rel_error: r.max_rel_error, checked: r.checked })
}

fn silhouettes(frames: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (top, height) = (rng.gen_range(2..10), rng.gen_range(40..54));
    let (left, width) = (rng.gen_range(14..24), rng.gen_range(12..24));
    Tensor::from_fn(&[frames, 1, 64, 64], |i| {
        let (f, r, c) = (i / 4096, (i / 64) % 64, i % 64);
        let sway = (f * 3) % 5;
        (r >= top && r < top + height && c >= left + sway && c < left + sway + width) as u8 as f64
    })
}

/// Mean cross-entropy of a batch of sequences as a function of every parameter.
fn model_block(arch: &Architecture, per_input: usize, seed: u64, rng: &mut ChaCha8Rng) -> Result<BlockCheck> {
    let params = arch.init(seed)?;
    let paths: Vec<String> = params.iter().map(|(p, _)| p.to_string()).collect();
    // Non-zero biases so that bias gradients are not trivially checked at the origin.
    let point: Vec<Tensor> = params.iter().map(|(_, t)| t.map(|v| v + 0.05 * (v * 7.3).sin() + 0.02)).collect();
    let batch: Vec<(Tensor, usize)> = (0..2).map(|i| (silhouettes(3, rng), i % arch.n_classes)).collect();
    let rebuild = |p: &[Tensor]| -> Result<ModelParams> {
        let mut m = ModelParams::new();
        for (path, t) in paths.iter().zip(p) {
            m.insert(path, t.clone())?;
        }
        Ok(m)
    };
    let op = FnOp {
        value: |p: &[Tensor]| {
            let m = rebuild(p)?;
            let mut rows = Vec::new();
            for (frames, _) in &batch {
                let mut tape = Tape::new();
                let mut binder = ParamBinder::frozen(&m, &[""]);
                let out = forward_tape(&mut tape, &mut binder, arch, frames.clone(), None)?;
                rows.extend_from_slice(tape.value(out.probs).data());
            }
            let labels: Vec<usize> = batch.iter().map(|b| b.1).collect();
            cross_entropy(&Tensor::new(vec![batch.len(), arch.n_classes], rows)?, &labels)
        },
        gradient: |p: &[Tensor]| {
            let m = rebuild(p)?;
            let mut total: Vec<Tensor> = p.iter().map(|t| Tensor::zeros(t.shape())).collect();
            for (frames, label) in &batch {
                let mut tape = Tape::new();
                let mut binder = ParamBinder::new(&m);
                let out = forward_tape(&mut tape, &mut binder, arch, frames.clone(), None)?;
                let probs = tape.value(out.probs).clone().reshape(&[1, arch.n_classes])?;
                let mut seed = cross_entropy_backward(&probs, &[*label])?.reshape(&[arch.n_classes])?;
                seed.scale(1.0 / batch.len() as f64);
                let mut grads = tape.backward(out.probs, seed)?;
                let got = binder.collect(&mut grads);
                for (path, acc) in paths.iter().zip(total.iter_mut()) {
                    if let Some(g) = got.get(path) {
                        acc.add_assign(g)?;
                    }
                }
            }
            Ok(total)
        },
    };
    let at = coords(&point, per_input, rng);
    let r = finite_diff_check_at(&op, &point, DEFAULT_EPSILON, &at)?;
    Ok(BlockCheck { block: "full model", max_rel_error: r.max_rel_error, checked: r.checked })
}

/// Runs every block check with a fixed seed; `scale` picks the architecture
/// of the whole-model check.
pub fn gradcheck_suite(scale: Scale, seed: u64) -> Result<Vec<BlockCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = usize::MAX;
    let mut out = Vec::new();
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::uniform(shape, 1.0, rng);

    let p = vec![r(&[2, 2, 8, 8], &mut rng), r(&[3, 2, 3, 3], &mut rng)];
    out.push(tape_block("conv", p, all, &mut rng, |t, v| t.conv2d(v[0], v[1], 1, 1))?);

    let p = vec![r(&[2, 3, 8, 8], &mut rng)];
    out.push(tape_block("pool", p, all, &mut rng, |t, v| t.max_pool2d(v[0], 2, 2))?);

    let p = vec![r(&[3, 5], &mut rng), r(&[5, 4], &mut rng), r(&[4], &mut rng)];
    out.push(tape_block("linear", p, all, &mut rng, |t, v| t.linear(v[0], v[1], v[2]))?);

    let logits = vec![Tensor::uniform(&[4, 6], 2.0, &mut rng)];
    let labels = [0usize, 5, 2, 2];
    let op = FnOp {
        value: |p: &[Tensor]| cross_entropy(&crate::tensor_core::softmax(&p[0]), &labels),
        gradient: |p: &[Tensor]| {
            let probs = crate::tensor_core::softmax(&p[0]);
            let g = cross_entropy_backward(&probs, &labels)?;
            Ok(vec![crate::tensor_core::softmax_backward(&probs, &g)])
        },
    };
    let at = coords(&logits, all, &mut rng);
    let rep = finite_diff_check_at(&op, &logits, DEFAULT_EPSILON, &at)?;
    out.push(BlockCheck { block: "softmax+cross-entropy", max_rel_error: rep.max_rel_error, checked: rep.checked });

    let p = vec![r(&[5], &mut rng), r(&[4], &mut rng), r(&[5, 12], &mut rng), r(&[4, 12], &mut rng), r(&[12], &mut rng)];
    out.push(tape_block("gru cell", p, all, &mut rng, |t, v| {
        t.gru_cell(v[0], v[1], GruVars { w_x: v[2], u_h: v[3], bias: v[4] })
    })?);

    out.push(bgru_block(all, &mut rng)?);

    let p = vec![r(&[4, 5], &mut rng)];
    out.push(tape_block("squash", p, all, &mut rng, |t, v| Ok(t.squash(v[0])))?);

    let p = vec![r(&[3, 4], &mut rng), r(&[3, 2, 4, 5], &mut rng)];
    out.push(tape_block("predictions", p, all, &mut rng, |t, v| t.predictions(v[0], v[1]))?);

    let p = vec![r(&[4, 3, 4], &mut rng)];
    out.push(tape_block("routing", p, all, &mut rng, |t, v| routing_on_tape(t, v[0], 3))?);

    let (arch, per_input) = match scale {
        Scale::Desk => (Architecture::desk(3), 6),
        Scale::Full => (Architecture::full(3), 2),
    };
    out.push(model_block(&arch, per_input, seed, &mut rng)?);
    Ok(out)
}

/// The unrolled bidirectional recurrence over 31 bins, differentiated with
/// respect to its input and both directions' weights.
fn bgru_block(per_input: usize, rng: &mut ChaCha8Rng) -> Result<BlockCheck> {
    let (d, h) = (4, 3);
    let specs: Vec<_> = direction_specs("rnn.fwd", d, h).into_iter().chain(direction_specs("rnn.bwd", d, h)).collect();
    let mut point = vec![Tensor::uniform(&[crate::pfe::BIN_COUNT, d], 1.0, rng)];
    point.extend(specs.iter().map(|s| Tensor::uniform(&s.shape, 0.8, rng)));
    let probe = Tensor::uniform(&[crate::pfe::BIN_COUNT, 2 * h], 1.0, rng);
    let rebuild = |p: &[Tensor]| -> Result<ModelParams> {
        let mut m = ModelParams::new();
        for (s, t) in specs.iter().zip(&p[1..]) {
            m.insert(&s.path, t.clone())?;
        }
        Ok(m)
    };
    let op = FnOp {
        value: |p: &[Tensor]| {
            let m = rebuild(p)?;
            let mut tape = Tape::new();
            let mut binder = ParamBinder::frozen(&m, &[""]);
            let x = tape.constant(p[0].clone());
            let out = recurrent_tape(&mut tape, &mut binder, x, true, None)?;
            Ok(tape.value(out).dot(&probe))
        },
        gradient: |p: &[Tensor]| {
            let m = rebuild(p)?;
            let mut tape = Tape::new();
            let mut binder = ParamBinder::new(&m);
            let x = tape.input(p[0].clone());
            let out = recurrent_tape(&mut tape, &mut binder, x, true, None)?;
            let mut grads = tape.backward(out, probe.clone())?;
            let gx = grads.take(x).unwrap_or_else(|| Tensor::zeros(p[0].shape()));
            let got = binder.collect(&mut grads);
            let mut all = vec![gx];
            all.extend(specs.iter().map(|s| got.get(&s.path).cloned().unwrap_or_else(|| Tensor::zeros(&s.shape))));
            Ok(all)
        },
    };
    let at = coords(&point, per_input, rng);
    let r = finite_diff_check_at(&op, &point, DEFAULT_EPSILON, &at)?;
    Ok(BlockCheck { block: "bgru", max_rel_error: r.max_rel_error, checked: r.checked })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_block_passes() {
        let checks = gradcheck_suite(Scale::Desk, 42).unwrap();
        let names: Vec<&str> = checks.iter().map(|c| c.block).collect();
        assert_eq!(
            names,
            ["conv", "pool", "linear", "softmax+cross-entropy", "gru cell", "bgru", "squash", "predictions", "routing", "full model"]
        );
        for c in &checks {
            assert!(c.passed() && c.checked > 0, "{c:?}");
        }
    }
}
