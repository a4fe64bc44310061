//! Bi-directional GRU over the bin sequence. The forward direction reads
//! bins first to last, the backward direction last to first, and each bin's
//! context is the forward state followed by the backward state.

pub mod cell;

use rand::Rng;

pub use cell::{gru_cell, GruWeights};

use crate::model::{ParamBinder, ParamSpec};
use crate::tensor_core::{tape::GruVars, Tape, Tensor, Var};
use crate::{Error, ModelParams, Result};

pub const DEFAULT_DROPOUT: f64 = 0.25;

/// Parameters of both directions.
#[derive(Debug, Clone, Copy)]
pub struct GruParams<'a> {
    pub forward: GruWeights<'a>,
    pub backward: GruWeights<'a>,
}

impl<'a> GruParams<'a> {
    pub fn from_model(params: &'a ModelParams) -> Result<Self> {
        Ok(GruParams {
            forward: direction(params, "rnn.fwd")?,
            backward: direction(params, "rnn.bwd")?,
        })
    }
}

/// Weights of one direction stored under `prefix`.
pub fn direction<'a>(params: &'a ModelParams, prefix: &str) -> Result<GruWeights<'a>> {
    Ok(GruWeights {
        w_x: params.get(&format!("{prefix}.w_x"))?,
        u_h: params.get(&format!("{prefix}.u_h"))?,
        bias: params.get(&format!("{prefix}.bias"))?,
    })
}

/// Declares one direction with input size `d_in` and hidden size `hidden`.
pub fn direction_specs(prefix: &str, d_in: usize, hidden: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::xavier(format!("{prefix}.w_x"), &[d_in, 3 * hidden], d_in, 3 * hidden),
        ParamSpec::xavier(format!("{prefix}.u_h"), &[hidden, 3 * hidden], hidden, 3 * hidden),
        ParamSpec::zeros(format!("{prefix}.bias"), &[3 * hidden]),
    ]
}

/// Per-bin context `[bins, 2H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinContextSet {
    pub context: Tensor,
}

impl BinContextSet {
    pub fn len(&self) -> usize {
        self.context.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.context.shape()[1]
    }

    /// Forward state of bin `i`.
    pub fn forward_state(&self, i: usize) -> &[f64] {
        &self.context.row(i)[..self.dim() / 2]
    }

    /// Backward state of bin `i`.
    pub fn backward_state(&self, i: usize) -> &[f64] {
        &self.context.row(i)[self.dim() / 2..]
    }
}

/// Inverted dropout mask: each entry is `0` with probability `rate` and
/// `1 / (1 - rate)` otherwise.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")))
    }
}

fn run(bins: &Tensor, w: GruWeights<'_>, reverse: bool) -> Result<Vec<Vec<f64>>> {
    let n = bins.shape()[0];
    let mut h = vec![0.0; w.hidden()];
    let mut states = vec![Vec::new(); n];
    let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..n).rev()) } else { Box::new(0..n) };
    for t in order {
        h = gru_cell(bins.row(t), &h, w)?.0;
        states[t] = h.clone();
    }
    Ok(states)
}

fn check_bins(bins: &Tensor) -> Result<()> {
    if bins.rank() == 2 {
        Ok(())
    } else {
        Err(Error::shape("bgru", format!("expected [bins, d], got {:?}", bins.shape())))
    }
}

/// Forward-only pass; `[bins, H]`.
pub fn gru_unidirectional(bins: &Tensor, w: GruWeights<'_>) -> Result<Tensor> {
    check_bins(bins)?;
    let states = run(bins, w, false)?;
    Tensor::new(vec![states.len(), w.hidden()], states.concat())
}

/// Bi-directional pass with output dropout when `training` is set. The rng is
/// not touched otherwise.
pub fn bgru_forward<R: Rng + ?Sized>(
    bins: &Tensor,
    params: GruParams<'_>,
    dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<BinContextSet> {
    check_bins(bins)?;
    check_rate(dropout)?;
    let fwd = run(bins, params.forward, false)?;
    let bwd = run(bins, params.backward, true)?;
    let width = params.forward.hidden() + params.backward.hidden();
    let mut data: Vec<f64> = fwd.iter().zip(&bwd).flat_map(|(f, b)| f.iter().chain(b).copied()).collect();
    if training && dropout > 0.0 {
        let mask = dropout_mask(data.len(), dropout, rng);
        for (v, m) in data.iter_mut().zip(mask) {
            *v *= m;
        }
    }
    let context = Tensor::new(vec![fwd.len(), width], data)?;
    context.ensure_finite("bgru_forward")?;
    Ok(BinContextSet { context })
}

fn direction_vars<'p>(tape: &mut Tape<'p>, binder: &mut ParamBinder<'p>, prefix: &str) -> Result<GruVars> {
    Ok(GruVars {
        w_x: binder.var(tape, &format!("{prefix}.w_x"))?,
        u_h: binder.var(tape, &format!("{prefix}.u_h"))?,
        bias: binder.var(tape, &format!("{prefix}.bias"))?,
    })
}

fn run_tape(tape: &mut Tape<'_>, bins: Var, vars: GruVars, reverse: bool) -> Result<Vec<Var>> {
    let n = tape.value(bins).shape()[0];
    let hidden = tape.value(vars.u_h).shape()[0];
    let mut h = tape.constant(Tensor::zeros(&[hidden]));
    let mut states = vec![h; n];
    let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..n).rev()) } else { Box::new(0..n) };
    for t in order {
        let x = tape.row(bins, t)?;
        h = tape.gru_cell(x, h, vars)?;
        states[t] = h;
    }
    Ok(states)
}

/// Recurrent block on a tape: `[bins, d]` to `[bins, H]` (forward only) or
/// `[bins, 2H]`, with an optional dropout mask applied to the output.
pub fn recurrent_tape<'p>(
    tape: &mut Tape<'p>,
    binder: &mut ParamBinder<'p>,
    bins: Var,
    bidirectional: bool,
    dropout_mask: Option<Vec<f64>>,
) -> Result<Var> {
    check_bins(tape.value(bins))?;
    let n = tape.value(bins).shape()[0];
    let fwd_vars = direction_vars(tape, binder, "rnn.fwd")?;
    let fwd = run_tape(tape, bins, fwd_vars, false)?;
    let hidden = tape.value(fwd[0]).len();
    let (parts, width) = if bidirectional {
        let bwd_vars = direction_vars(tape, binder, "rnn.bwd")?;
        let bwd = run_tape(tape, bins, bwd_vars, true)?;
        let parts: Vec<Var> = fwd.iter().zip(&bwd).flat_map(|(&f, &b)| [f, b]).collect();
        (parts, hidden + tape.value(bwd[0]).len())
    } else {
        (fwd, hidden)
    };
    let out = tape.concat(&parts, &[n, width])?;
    match dropout_mask {
        Some(mask) => tape.mask(out, mask),
        None => Ok(out),
    }
}
