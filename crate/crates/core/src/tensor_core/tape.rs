//! Reverse-mode recording over the fixed set of model operations.
//!
//! Every method on [`Tape`] evaluates its operation immediately and records
//! what the backward pass needs. Parameters are borrowed rather than copied,
//! so a tape lives no longer than the parameter tree it reads.

use std::borrow::Cow;

use super::{activation, conv, dense, pool, softmax, Tensor};
use crate::capsule::ops as caps;
use crate::pfe::{bin_map, hpm, set_pool};
use crate::recurrent::cell::{self, GruCache, GruWeights};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_x: Var,
    pub u_h: Var,
    pub bias: Var,
}

enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    LeakyRelu { input: Var, slope: f64 },
    SetPool { input: Var, argmax: Vec<u32> },
    Hpm { input: Var, scales: Vec<usize>, argmax: Vec<u32> },
    BinLinear { x: Var, w: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    GruCell { x: Var, h: Var, params: GruVars, cache: GruCache },
    Slice { input: Var, offset: usize },
    Concat { parts: Vec<Var> },
    Reshape { input: Var },
    Mask { input: Var, mask: Vec<f64> },
    Squash { input: Var },
    Predict { u: Var, w: Var },
    Softmax { input: Var },
    RouteSum { c: Var, uhat: Var },
    Agreement { uhat: Var, v: Var },
    Add { a: Var, b: Var },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients indexed by [`Var`], produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(Cow::Owned(value), op, needs)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// An owned leaf whose gradient is collected.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// A borrowed leaf; `trainable` decides whether its gradient is collected.
    pub fn param(&mut self, value: &'a Tensor, trainable: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, trainable)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = conv::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push_op(out, Op::Conv2d { input, kernel, stride, padding }, &[input, kernel]))
    }

    pub fn max_pool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = pool::max_pool2d(self.value(input), window, stride)?;
        Ok(self.push_op(out, Op::MaxPool2d { input, argmax }, &[input]))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let out = activation::leaky_relu(self.value(input), slope);
        self.push_op(out, Op::LeakyRelu { input, slope }, &[input])
    }

    pub fn set_pool(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = set_pool::set_pool(self.value(input))?;
        Ok(self.push_op(out, Op::SetPool { input, argmax }, &[input]))
    }

    pub fn hpm_split(&mut self, input: Var, scales: &[usize]) -> Result<Var> {
        let (out, argmax) = hpm::hpm_split(self.value(input), scales)?;
        let op = Op::Hpm { input, scales: scales.to_vec(), argmax };
        Ok(self.push_op(out, op, &[input]))
    }

    pub fn bin_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = bin_map::bin_linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push_op(out, Op::BinLinear { x, w, b }, &[x, w, b]))
    }

    /// Affine map of a `[B, D_in]` matrix or a `[D_in]` vector.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = if xv.rank() == 1 {
            let as_row = xv.clone().reshape(&[1, xv.len()])?;
            let y = dense::linear(&as_row, self.value(w), self.value(b))?;
            let n = y.len();
            y.reshape(&[n])?
        } else {
            dense::linear(xv, self.value(w), self.value(b))?
        };
        Ok(self.push_op(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn gru_cell(&mut self, x: Var, h: Var, params: GruVars) -> Result<Var> {
        let weights = GruWeights {
            w_x: self.value(params.w_x),
            u_h: self.value(params.u_h),
            bias: self.value(params.bias),
        };
        let (out, cache) = cell::gru_cell(self.value(x).data(), self.value(h).data(), weights)?;
        let n = out.len();
        let out = Tensor::new(vec![n], out)?;
        let inputs = [x, h, params.w_x, params.u_h, params.bias];
        Ok(self.push_op(out, Op::GruCell { x, h, params, cache }, &inputs))
    }

    /// `len` consecutive flat elements starting at `offset`, shaped `shape`.
    pub fn slice(&mut self, input: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let src = self.value(input);
        if offset + len > src.len() {
            return Err(Error::shape("slice", format!("{offset}+{len} beyond {}", src.len())));
        }
        let out = Tensor::new(shape.to_vec(), src.data()[offset..offset + len].to_vec())?;
        Ok(self.push_op(out, Op::Slice { input, offset }, &[input]))
    }

    /// Row `i` of a tensor viewed as `[rows, rest]`.
    pub fn row(&mut self, input: Var, i: usize) -> Result<Var> {
        let src = self.value(input);
        let width = src.len() / src.shape()[0];
        self.slice(input, i * width, &[width])
    }

    /// Concatenates the flat data of `parts` and shapes the result as `shape`.
    pub fn concat(&mut self, parts: &[Var], shape: &[usize]) -> Result<Var> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push_op(out, Op::Concat { parts: parts.to_vec() }, parts))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape { input }, &[input]))
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mask(&mut self, input: Var, mask: Vec<f64>) -> Result<Var> {
        let src = self.value(input);
        if mask.len() != src.len() {
            return Err(Error::shape("mask", format!("{} vs {}", mask.len(), src.len())));
        }
        let mut out = src.clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        Ok(self.push_op(out, Op::Mask { input, mask }, &[input]))
    }

    /// Squash applied to each row (last axis).
    pub fn squash(&mut self, input: Var) -> Var {
        let out = caps::squash_rows(self.value(input));
        self.push_op(out, Op::Squash { input }, &[input])
    }

    pub fn predictions(&mut self, u: Var, w: Var) -> Result<Var> {
        let out = caps::predictions(self.value(u), self.value(w))?;
        Ok(self.push_op(out, Op::Predict { u, w }, &[u, w]))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, input: Var) -> Var {
        let out = softmax::softmax(self.value(input));
        self.push_op(out, Op::Softmax { input }, &[input])
    }

    pub fn route_sum(&mut self, c: Var, uhat: Var) -> Result<Var> {
        let out = caps::route_sum(self.value(c), self.value(uhat))?;
        Ok(self.push_op(out, Op::RouteSum { c, uhat }, &[c, uhat]))
    }

    pub fn agreement(&mut self, uhat: Var, v: Var) -> Result<Var> {
        let out = caps::agreement(self.value(uhat), self.value(v))?;
        Ok(self.push_op(out, Op::Agreement { uhat, v }, &[uhat, v]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        Ok(self.push_op(out, Op::Add { a, b }, &[a, b]))
    }

    /// Back-propagates `seed` (shaped like `root`) to every node that needs a
    /// gradient. Gradients of intermediate nodes are released as soon as they
    /// have been consumed; leaves keep theirs.
    pub fn backward(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} for value {:?}", seed.shape(), self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (var, contribution) in self.node_backward(node, &g)? {
                accumulate(&mut grads, var, contribution)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<'a>, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let needs = |v: Var| self.needs(v);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { input, kernel, stride, padding } => {
                let (gi, gk) =
                    conv::conv2d_backward(val(input), val(kernel), stride, padding, g, needs(input))?;
                if let Some(gi) = gi {
                    out.push((input, gi));
                }
                out.push((kernel, gk));
            }
            Op::MaxPool2d { input, argmax } => {
                out.push((*input, pool::max_pool2d_backward(val(*input).shape(), argmax, g)));
            }
            &Op::LeakyRelu { input, slope } => {
                out.push((input, activation::leaky_relu_backward(val(input), slope, g)));
            }
            Op::SetPool { input, argmax } => {
                out.push((*input, set_pool::set_pool_backward(val(*input).shape(), argmax, g)));
            }
            Op::Hpm { input, scales, argmax } => {
                out.push((*input, hpm::hpm_backward(val(*input).shape(), scales, argmax, g)));
            }
            &Op::BinLinear { x, w, b } => {
                let (gx, gw, gb) = bin_map::bin_linear_backward(val(x), val(w), g);
                out.extend([(x, gx), (w, gw), (b, gb)]);
            }
            &Op::Linear { x, w, b } => {
                let xv = val(x);
                if xv.rank() == 1 {
                    let row = xv.clone().reshape(&[1, xv.len()])?;
                    let grow = g.clone().reshape(&[1, g.len()])?;
                    let lg = dense::linear_backward(&row, val(w), &grow);
                    out.extend([(x, lg.x.reshape(&[xv.len()])?), (w, lg.weight), (b, lg.bias)]);
                } else {
                    let lg = dense::linear_backward(xv, val(w), g);
                    out.extend([(x, lg.x), (w, lg.weight), (b, lg.bias)]);
                }
            }
            Op::GruCell { x, h, params, cache } => {
                let weights = GruWeights {
                    w_x: val(params.w_x),
                    u_h: val(params.u_h),
                    bias: val(params.bias),
                };
                let cg = cell::gru_cell_backward(val(*x).data(), val(*h).data(), weights, cache, g.data());
                out.push((*x, Tensor::new(val(*x).shape().to_vec(), cg.x)?));
                out.push((*h, Tensor::new(val(*h).shape().to_vec(), cg.h)?));
                out.extend([(params.w_x, cg.w_x), (params.u_h, cg.u_h), (params.bias, cg.bias)]);
            }
            &Op::Slice { input, offset } => {
                let mut full = Tensor::zeros(val(input).shape());
                full.data_mut()[offset..offset + g.len()].copy_from_slice(g.data());
                out.push((input, full));
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let shape = val(p).shape().to_vec();
                    let n = val(p).len();
                    out.push((p, Tensor::new(shape, g.data()[offset..offset + n].to_vec())?));
                    offset += n;
                }
            }
            &Op::Reshape { input } => {
                out.push((input, g.clone().reshape(val(input).shape())?));
            }
            Op::Mask { input, mask } => {
                let mut gi = g.clone();
                for (v, m) in gi.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                out.push((*input, gi));
            }
            &Op::Squash { input } => {
                out.push((input, caps::squash_rows_backward(val(input), g)));
            }
            &Op::Predict { u, w } => {
                let (gu, gw) = caps::predictions_backward(val(u), val(w), g);
                out.extend([(u, gu), (w, gw)]);
            }
            &Op::Softmax { input } => {
                out.push((input, softmax::softmax_backward(&node.value, g)));
            }
            &Op::RouteSum { c, uhat } => {
                let (gc, gu) = caps::route_sum_backward(val(c), val(uhat), g);
                out.extend([(c, gc), (uhat, gu)]);
            }
            &Op::Agreement { uhat, v } => {
                let (gu, gv) = caps::agreement_backward(val(uhat), val(v), g);
                out.extend([(uhat, gu), (v, gv)]);
            }
            &Op::Add { a, b } => {
                out.extend([(a, g.clone()), (b, g.clone())]);
            }
        }
        out.retain(|(v, _)| needs(*v));
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, contribution: Tensor) -> Result<()> {
    match &mut grads[var.0] {
        Some(acc) => acc.add_assign(&contribution),
        slot @ None => {
            *slot = Some(contribution);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_core::gradcheck::{finite_diff_check, FnOp, DEFAULT_EPSILON};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks a tape-built function `f(inputs) -> output` contracted with a
    /// fixed random direction.
    fn check(point: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let probe = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = point.iter().map(|t| tape.input(t.clone())).collect();
            let out = build(&mut tape, &vars).unwrap();
            Tensor::uniform(tape.value(out).shape(), 1.0, &mut rng)
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
        finite_diff_check(&op, &point, DEFAULT_EPSILON).unwrap().max_rel_error
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn conv_and_pool_gradients() {
        let err = check(vec![rand(&[2, 2, 6, 6], 1), rand(&[3, 2, 3, 3], 2)], |t, v| {
            let c = t.conv2d(v[0], v[1], 1, 1)?;
            let a = t.leaky_relu(c, 0.01);
            t.max_pool2d(a, 2, 2)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn strided_conv_gradient() {
        let err = check(vec![rand(&[1, 2, 7, 7], 3), rand(&[2, 2, 3, 3], 4)], |t, v| t.conv2d(v[0], v[1], 2, 1));
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn set_pool_and_hpm_gradients() {
        let err = check(vec![rand(&[3, 2, 16, 3], 5)], |t, v| {
            let p = t.set_pool(v[0])?;
            t.hpm_split(p, &[1, 2, 4, 8, 16])
        });
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn gru_cell_gradient() {
        let err = check(
            vec![rand(&[4], 6), rand(&[3], 7), rand(&[4, 9], 8), rand(&[3, 9], 9), rand(&[9], 10)],
            |t, v| t.gru_cell(v[0], v[1], GruVars { w_x: v[2], u_h: v[3], bias: v[4] }),
        );
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn capsule_ops_gradient() {
        let err = check(vec![rand(&[3, 4], 11), rand(&[3, 2, 4, 5], 12), rand(&[3, 2], 13)], |t, v| {
            let u = t.squash(v[0]);
            let uhat = t.predictions(u, v[1])?;
            let c = t.softmax(v[2]);
            let s = t.route_sum(c, uhat)?;
            let vv = t.squash(s);
            let a = t.agreement(uhat, vv)?;
            t.add(a, v[2])
        });
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn structural_ops_gradient() {
        let err = check(vec![rand(&[2, 6], 14), rand(&[6, 3], 15), rand(&[3], 16), rand(&[2, 6], 17)], |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            let r = t.row(v[3], 1)?;
            let z = t.linear(r, v[1], v[2])?;
            let cat = t.concat(&[y, z], &[9])?;
            let m = t.mask(cat, (0..9).map(|i| i as f64 * 0.5).collect())?;
            t.reshape(m, &[3, 3])
        });
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn bin_linear_gradient() {
        let err = check(vec![rand(&[4, 3], 18), rand(&[4, 3, 2], 19), rand(&[4, 2], 20)], |t, v| {
            t.bin_linear(v[0], v[1], v[2])
        });
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.input(Tensor::full(&[2], 2.0));
        let s = tape.add(a, b).unwrap();
        let mut grads = tape.backward(s, Tensor::full(&[2], 1.0)).unwrap();
        assert!(grads.take(a).is_none());
        assert_eq!(grads.take(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn seed_shape_must_match() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2]));
        assert!(tape.backward(a, Tensor::zeros(&[3])).is_err());
    }
}
