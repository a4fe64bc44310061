//! Matrix products and the fully connected layer.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

use super::Tensor;
use crate::{Error, Result};

/// `c = beta * c + op(a) * op(b)` on row-major buffers, where `op` optionally
/// transposes. `op(a)` is `m x k`, `op(b)` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let a = if a_transposed {
        ArrayView2::from_shape((m, k).strides((1, m)), a)
    } else {
        ArrayView2::from_shape((m, k), a)
    }
    .expect("gemm: a extent");
    let b = if b_transposed {
        ArrayView2::from_shape((k, n).strides((1, k)), b)
    } else {
        ArrayView2::from_shape((k, n), b)
    }
    .expect("gemm: b extent");
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm: c extent");
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

fn matrix_dims(t: &Tensor, op: &'static str, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(
            op,
            format!("{what} must be a matrix, got {:?}", t.shape()),
        )),
    }
}

/// `a · b` for matrices.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul", "lhs")?;
    let (k2, n) = matrix_dims(b, "matmul", "rhs")?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("{m}x{k} by {k2}x{n}")));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    Tensor::new(vec![m, n], out)
}

/// Gradients of [`linear`] with respect to each of its operands.
#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub x: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// `x · weight + bias` with `x: [B, D_in]`, `weight: [D_in, D_out]`, `bias: [D_out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, d_in) = matrix_dims(x, "linear", "input")?;
    let (w_in, d_out) = matrix_dims(weight, "linear", "weight")?;
    if d_in != w_in || bias.shape() != [d_out] {
        return Err(Error::shape(
            "linear",
            format!(
                "input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = Vec::with_capacity(batch * d_out);
    for _ in 0..batch {
        out.extend_from_slice(bias.data());
    }
    gemm(batch, d_in, d_out, x.data(), false, weight.data(), false, 1.0, &mut out);
    Tensor::new(vec![batch, d_out], out)
}

pub fn linear_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> LinearGrads {
    let (batch, d_in) = (x.shape()[0], x.shape()[1]);
    let d_out = weight.shape()[1];
    let mut gx = vec![0.0; batch * d_in];
    gemm(batch, d_out, d_in, grad_out.data(), false, weight.data(), true, 0.0, &mut gx);
    let mut gw = vec![0.0; d_in * d_out];
    gemm(d_in, batch, d_out, x.data(), true, grad_out.data(), false, 0.0, &mut gw);
    let mut gb = vec![0.0; d_out];
    for r in 0..batch {
        for (acc, g) in gb.iter_mut().zip(grad_out.row(r)) {
            *acc += g;
        }
    }
    LinearGrads {
        x: Tensor::new(vec![batch, d_in], gx).expect("linear grad x"),
        weight: Tensor::new(vec![d_in, d_out], gw).expect("linear grad w"),
        bias: Tensor::new(vec![d_out], gb).expect("linear grad b"),
    }
}
