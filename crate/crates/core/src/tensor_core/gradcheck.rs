//! Central finite-difference verification of analytic gradients.

use super::Tensor;
use crate::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Floor on the denominator of the relative error. Central differences at
/// the default step resolve a gradient to about 1e-11 absolute, so smaller
/// gradients are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-6;

/// A scalar function of several tensors with an analytic gradient.
pub trait Differentiable {
    fn value(&self, point: &[Tensor]) -> Result<f64>;

    /// One gradient tensor per input, each shaped like the input.
    fn gradient(&self, point: &[Tensor]) -> Result<Vec<Tensor>>;
}

/// Adapts a pair of closures into a [`Differentiable`].
pub struct FnOp<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> Differentiable for FnOp<V, G>
where
    V: Fn(&[Tensor]) -> Result<f64>,
    G: Fn(&[Tensor]) -> Result<Vec<Tensor>>,
{
    fn value(&self, point: &[Tensor]) -> Result<f64> {
        (self.value)(point)
    }

    fn gradient(&self, point: &[Tensor]) -> Result<Vec<Tensor>> {
        (self.gradient)(point)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)
    pub max_rel_error: f64,
    /// `(input, coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of `op` at `point` against central
/// differences for every coordinate of every input.
pub fn finite_diff_check(
    op: &impl Differentiable,
    point: &[Tensor],
    epsilon: f64,
) -> Result<GradCheckReport> {
    let coords: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |c| (i, c)))
        .collect();
    finite_diff_check_at(op, point, epsilon, &coords)
}

/// Like [`finite_diff_check`] restricted to the listed `(input, coordinate)` pairs.
pub fn finite_diff_check_at(
    op: &impl Differentiable,
    point: &[Tensor],
    epsilon: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let analytic = op.gradient(point)?;
    if analytic.len() != point.len()
        || analytic.iter().zip(point).any(|(g, p)| g.shape() != p.shape())
    {
        return Err(Error::shape("finite_diff_check", "gradient shapes differ from the point"));
    }
    for g in &analytic {
        g.ensure_finite("analytic gradient")?;
    }
    let mut probe = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &(i, c) in coords {
        let original = probe[i].data()[c];
        probe[i].data_mut()[c] = original + epsilon;
        let plus = op.value(&probe)?;
        probe[i].data_mut()[c] = original - epsilon;
        let minus = op.value(&probe)?;
        probe[i].data_mut()[c] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at input {i} coordinate {c}")));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = relative_error(analytic[i].data()[c], numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = Some((i, c));
        }
        report.checked += 1;
    }
    Ok(report)
}
