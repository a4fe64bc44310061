//! GRU cell with gates stacked as `[z | r | n]` along the output axis.
//!
//! ```text
//! z  = σ(W_z x + U_z h + b_z)
//! r  = σ(W_r x + U_r h + b_r)
//! n  = tanh(W_n x + U_n (r ⊙ h) + b_n)
//! h' = (1 - z) ⊙ n + z ⊙ h
//! ```

use crate::tensor_core::activation::sigmoid;
use crate::tensor_core::Tensor;
use crate::{Error, Result};

/// Borrowed cell parameters: `w_x: [d, 3H]`, `u_h: [H, 3H]`, `bias: [3H]`.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights<'a> {
    pub w_x: &'a Tensor,
    pub u_h: &'a Tensor,
    pub bias: &'a Tensor,
}

impl GruWeights<'_> {
    pub fn input_dim(&self) -> usize {
        self.w_x.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.u_h.shape()[0]
    }

    fn check(&self, x: &[f64], h: &[f64]) -> Result<()> {
        let hidden = self.hidden();
        let ok = self.w_x.rank() == 2
            && self.w_x.shape()[1] == 3 * hidden
            && self.u_h.shape() == [hidden, 3 * hidden]
            && self.bias.shape() == [3 * hidden]
            && x.len() == self.input_dim()
            && h.len() == hidden;
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "gru_cell",
                format!(
                    "x {}, h {}, w_x {:?}, u_h {:?}, bias {:?}",
                    x.len(),
                    h.len(),
                    self.w_x.shape(),
                    self.u_h.shape(),
                    self.bias.shape()
                ),
            ))
        }
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCache {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub n: Vec<f64>,
    pub rh: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GruGrads {
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    pub w_x: Tensor,
    pub u_h: Tensor,
    pub bias: Tensor,
}

/// `acc[j] += Σ_i v[i] * m[i, offset + j]` for `j < width`, `m` row-major with `stride` columns.
#[inline]
fn vec_mat_acc(v: &[f64], m: &[f64], stride: usize, offset: usize, acc: &mut [f64]) {
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        let row = &m[i * stride + offset..i * stride + offset + acc.len()];
        for (a, &w) in acc.iter_mut().zip(row) {
            *a += vi * w;
        }
    }
}

pub fn gru_cell(x: &[f64], h: &[f64], w: GruWeights<'_>) -> Result<(Vec<f64>, GruCache)> {
    w.check(x, h)?;
    let hidden = w.hidden();
    let stride = 3 * hidden;
    let mut ax = w.bias.data().to_vec();
    vec_mat_acc(x, w.w_x.data(), stride, 0, &mut ax);
    let (ax_zr, ax_n) = ax.split_at_mut(2 * hidden);
    let mut hzr = vec![0.0; 2 * hidden];
    vec_mat_acc(h, w.u_h.data(), stride, 0, &mut hzr);
    let z: Vec<f64> = (0..hidden).map(|j| sigmoid(ax_zr[j] + hzr[j])).collect();
    let r: Vec<f64> = (0..hidden)
        .map(|j| sigmoid(ax_zr[hidden + j] + hzr[hidden + j]))
        .collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    vec_mat_acc(&rh, w.u_h.data(), stride, 2 * hidden, ax_n);
    let n: Vec<f64> = ax_n.iter().map(|v| v.tanh()).collect();
    let out = (0..hidden)
        .map(|j| (1.0 - z[j]) * n[j] + z[j] * h[j])
        .collect();
    Ok((out, GruCache { z, r, n, rh }))
}

pub fn gru_cell_backward(
    x: &[f64],
    h: &[f64],
    w: GruWeights<'_>,
    cache: &GruCache,
    grad: &[f64],
) -> GruGrads {
    let hidden = w.hidden();
    let d_in = w.input_dim();
    let stride = 3 * hidden;
    let GruCache { z, r, n, rh } = cache;

    let mut dax = vec![0.0; stride];
    let mut dh: Vec<f64> = grad.iter().zip(z).map(|(g, z)| g * z).collect();
    for j in 0..hidden {
        let dz = grad[j] * (h[j] - n[j]);
        let dn = grad[j] * (1.0 - z[j]);
        dax[j] = dz * z[j] * (1.0 - z[j]);
        dax[2 * hidden + j] = dn * (1.0 - n[j] * n[j]);
    }

    let u = w.u_h.data();
    let mut du = vec![0.0; hidden * stride];
    // candidate path through r ⊙ h
    let (dazr, dan) = dax.split_at_mut(2 * hidden);
    let mut drh = vec![0.0; hidden];
    for i in 0..hidden {
        let row = &u[i * stride + 2 * hidden..(i + 1) * stride];
        drh[i] = row.iter().zip(dan.iter()).map(|(a, b)| a * b).sum();
        let du_row = &mut du[i * stride + 2 * hidden..(i + 1) * stride];
        for (d, &g) in du_row.iter_mut().zip(dan.iter()) {
            *d = rh[i] * g;
        }
    }
    for j in 0..hidden {
        let dr = drh[j] * h[j];
        dh[j] += drh[j] * r[j];
        dazr[hidden + j] = dr * r[j] * (1.0 - r[j]);
    }
    // update and reset gates through h
    for i in 0..hidden {
        let row = &u[i * stride..i * stride + 2 * hidden];
        dh[i] += row.iter().zip(dazr.iter()).map(|(a, b)| a * b).sum::<f64>();
        let du_row = &mut du[i * stride..i * stride + 2 * hidden];
        for (d, &g) in du_row.iter_mut().zip(dazr.iter()) {
            *d = h[i] * g;
        }
    }

    let wx = w.w_x.data();
    let mut dw = vec![0.0; d_in * stride];
    let mut dx = vec![0.0; d_in];
    for i in 0..d_in {
        let row = &wx[i * stride..(i + 1) * stride];
        dx[i] = row.iter().zip(&dax).map(|(a, b)| a * b).sum();
        for (d, &g) in dw[i * stride..(i + 1) * stride].iter_mut().zip(&dax) {
            *d = x[i] * g;
        }
    }

    GruGrads {
        x: dx,
        h: dh,
        w_x: Tensor::new(vec![d_in, stride], dw).expect("gru grad w_x"),
        u_h: Tensor::new(vec![hidden, stride], du).expect("gru grad u_h"),
        bias: Tensor::new(vec![stride], dax).expect("gru grad bias"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    /// The four cell equations written out with explicit matrices.
    fn transcribed(x: &[f64], h: &[f64], w: GruWeights<'_>) -> Vec<f64> {
        let hd = w.hidden();
        let s = 3 * hd;
        let wx = |i: usize, g: usize, j: usize| w.w_x.data()[i * s + g * hd + j];
        let uh = |i: usize, g: usize, j: usize| w.u_h.data()[i * s + g * hd + j];
        let b = |g: usize, j: usize| w.bias.data()[g * hd + j];
        let lin = |g: usize, j: usize, v: &[f64]| {
            (0..x.len()).map(|i| x[i] * wx(i, g, j)).sum::<f64>()
                + (0..hd).map(|i| v[i] * uh(i, g, j)).sum::<f64>()
                + b(g, j)
        };
        let z: Vec<f64> = (0..hd).map(|j| sig(lin(0, j, h))).collect();
        let r: Vec<f64> = (0..hd).map(|j| sig(lin(1, j, h))).collect();
        let rh: Vec<f64> = (0..hd).map(|j| r[j] * h[j]).collect();
        let n: Vec<f64> = (0..hd).map(|j| lin(2, j, &rh).tanh()).collect();
        (0..hd).map(|j| (1.0 - z[j]) * n[j] + z[j] * h[j]).collect()
    }

    fn zero_weights(d: usize, hd: usize) -> (Tensor, Tensor, Tensor) {
        (
            Tensor::zeros(&[d, 3 * hd]),
            Tensor::zeros(&[hd, 3 * hd]),
            Tensor::zeros(&[3 * hd]),
        )
    }

    #[test]
    fn zero_parameters_halve_the_state() {
        let (a, b, c) = zero_weights(3, 4);
        let w = GruWeights { w_x: &a, u_h: &b, bias: &c };
        let h = [0.4, -1.0, 2.0, 0.0];
        let (out, _) = gru_cell(&[1.0, 2.0, 3.0], &h, w).unwrap();
        assert_eq!(out, vec![0.2, -0.5, 1.0, 0.0]);
        let (out, _) = gru_cell(&[1.0, 2.0, 3.0], &[0.0; 4], w).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn matches_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let a = Tensor::uniform(&[5, 18], 0.8, &mut rng);
        let b = Tensor::uniform(&[6, 18], 0.8, &mut rng);
        let c = Tensor::uniform(&[18], 0.8, &mut rng);
        let w = GruWeights { w_x: &a, u_h: &b, bias: &c };
        let x = Tensor::uniform(&[5], 1.0, &mut rng);
        let h = Tensor::uniform(&[6], 1.0, &mut rng);
        let (out, _) = gru_cell(x.data(), h.data(), w).unwrap();
        for (p, q) in out.iter().zip(transcribed(x.data(), h.data(), w)) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let (a, b, c) = zero_weights(3, 4);
        let w = GruWeights { w_x: &a, u_h: &b, bias: &c };
        assert!(gru_cell(&[0.0; 2], &[0.0; 4], w).is_err());
    }
}
