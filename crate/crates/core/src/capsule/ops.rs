use crate::tensor_core::Tensor;
use crate::{Error, Result};

/// Scale applied to `s`: `‖s‖ / (1 + ‖s‖²)`, which is 0 at the origin.
#[inline]
fn squash_factor(norm2: f64) -> f64 {
    norm2.sqrt() / (1.0 + norm2)
}

/// `d factor / d‖s‖²`, or 0 at the origin where the product with `sg·s`
/// vanishes.
#[inline]
fn squash_factor_derivative(norm2: f64) -> f64 {
    if norm2 == 0.0 {
        return 0.0;
    }
    let r = norm2.sqrt();
    (1.0 - norm2) / (2.0 * r * (1.0 + norm2) * (1.0 + norm2))
}

/// Shrinks `s` to length `‖s‖² / (1 + ‖s‖²)` keeping its direction.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let norm2: f64 = s.iter().map(|v| v * v).sum();
    let f = squash_factor(norm2);
    s.iter().map(|v| f * v).collect()
}

/// Vector-Jacobian product of [`squash`].
pub fn squash_backward(s: &[f64], grad: &[f64]) -> Vec<f64> {
    let norm2: f64 = s.iter().map(|v| v * v).sum();
    let f = squash_factor(norm2);
    let df = squash_factor_derivative(norm2);
    let sg: f64 = s.iter().zip(grad).map(|(a, b)| a * b).sum();
    s.iter()
        .zip(grad)
        .map(|(&sv, &gv)| f * gv + 2.0 * df * sg * sv)
        .collect()
}

/// Squashes every row of a `[N, D]` tensor (or the whole of a vector).
pub fn squash_rows(x: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap_or(&1);
    let data = x.data().chunks(d).flat_map(squash).collect();
    Tensor::new(x.shape().to_vec(), data).expect("squash keeps shape")
}

pub fn squash_rows_backward(x: &Tensor, grad: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap_or(&1);
    let data = x
        .data()
        .chunks(d)
        .zip(grad.data().chunks(d))
        .flat_map(|(s, g)| squash_backward(s, g))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("squash keeps shape")
}

/// Prediction vectors `û[i, j] = W[i, j]ᵀ u[i]` with `u: [C, D1]`,
/// `W: [C, J, D1, D2]`, giving `[C, J, D2]`.
pub fn predictions(u: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (&[c, d1], &[wc, j, wd1, d2]) = (u.shape(), w.shape()) else {
        return Err(Error::shape("predictions", format!("u {:?}, W {:?}", u.shape(), w.shape())));
    };
    if wc != c || wd1 != d1 {
        return Err(Error::shape("predictions", format!("u {:?}, W {:?}", u.shape(), w.shape())));
    }
    let mut out = vec![0.0; c * j * d2];
    let (ud, wd) = (u.data(), w.data());
    for i in 0..c {
        for jj in 0..j {
            let o = &mut out[(i * j + jj) * d2..(i * j + jj + 1) * d2];
            let block = &wd[(i * j + jj) * d1 * d2..(i * j + jj + 1) * d1 * d2];
            for (k, &uk) in ud[i * d1..(i + 1) * d1].iter().enumerate() {
                for (acc, &wv) in o.iter_mut().zip(&block[k * d2..(k + 1) * d2]) {
                    *acc += uk * wv;
                }
            }
        }
    }
    Tensor::new(vec![c, j, d2], out)
}

/// Returns `(grad_u, grad_w)`.
pub fn predictions_backward(u: &Tensor, w: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (c, j, d1, d2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let mut gu = Tensor::zeros(u.shape());
    let mut gw = Tensor::zeros(w.shape());
    let (ud, wd, gd) = (u.data(), w.data(), grad.data());
    for i in 0..c {
        for jj in 0..j {
            let g = &gd[(i * j + jj) * d2..(i * j + jj + 1) * d2];
            let base = (i * j + jj) * d1 * d2;
            for k in 0..d1 {
                let w_row = &wd[base + k * d2..base + (k + 1) * d2];
                gu.data_mut()[i * d1 + k] += w_row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                let uk = ud[i * d1 + k];
                for (dst, &gv) in gw.data_mut()[base + k * d2..base + (k + 1) * d2].iter_mut().zip(g) {
                    *dst = uk * gv;
                }
            }
        }
    }
    (gu, gw)
}

/// Coupling-weighted sum `s[j] = Σ_i c[i, j] û[i, j]`: `[C, J]`, `[C, J, D2]` → `[J, D2]`.
pub fn route_sum(c: &Tensor, uhat: &Tensor) -> Result<Tensor> {
    let (&[ci, cj], &[ui, uj, d2]) = (c.shape(), uhat.shape()) else {
        return Err(Error::shape("route_sum", format!("c {:?}, û {:?}", c.shape(), uhat.shape())));
    };
    if ci != ui || cj != uj {
        return Err(Error::shape("route_sum", format!("c {:?}, û {:?}", c.shape(), uhat.shape())));
    }
    let mut out = vec![0.0; cj * d2];
    for i in 0..ci {
        for j in 0..cj {
            let w = c.data()[i * cj + j];
            let u = &uhat.data()[(i * cj + j) * d2..(i * cj + j + 1) * d2];
            for (o, &v) in out[j * d2..(j + 1) * d2].iter_mut().zip(u) {
                *o += w * v;
            }
        }
    }
    Tensor::new(vec![cj, d2], out)
}

/// Returns `(grad_c, grad_uhat)`.
pub fn route_sum_backward(c: &Tensor, uhat: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (ci, cj, d2) = (uhat.shape()[0], uhat.shape()[1], uhat.shape()[2]);
    let mut gc = Tensor::zeros(c.shape());
    let mut gu = Tensor::zeros(uhat.shape());
    for i in 0..ci {
        for j in 0..cj {
            let g = &grad.data()[j * d2..(j + 1) * d2];
            let u = &uhat.data()[(i * cj + j) * d2..(i * cj + j + 1) * d2];
            gc.data_mut()[i * cj + j] = u.iter().zip(g).map(|(a, b)| a * b).sum();
            let w = c.data()[i * cj + j];
            for (dst, &gv) in gu.data_mut()[(i * cj + j) * d2..(i * cj + j + 1) * d2]
                .iter_mut()
                .zip(g)
            {
                *dst = w * gv;
            }
        }
    }
    (gc, gu)
}

/// Agreement `a[i, j] = û[i, j] · v[j]`: `[C, J, D2]`, `[J, D2]` → `[C, J]`.
pub fn agreement(uhat: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (&[ci, cj, d2], &[vj, vd]) = (uhat.shape(), v.shape()) else {
        return Err(Error::shape("agreement", format!("û {:?}, v {:?}", uhat.shape(), v.shape())));
    };
    if vj != cj || vd != d2 {
        return Err(Error::shape("agreement", format!("û {:?}, v {:?}", uhat.shape(), v.shape())));
    }
    let out = (0..ci * cj)
        .map(|ij| {
            let j = ij % cj;
            uhat.data()[ij * d2..(ij + 1) * d2]
                .iter()
                .zip(&v.data()[j * d2..(j + 1) * d2])
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    Tensor::new(vec![ci, cj], out)
}

/// Returns `(grad_uhat, grad_v)`.
pub fn agreement_backward(uhat: &Tensor, v: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let (ci, cj, d2) = (uhat.shape()[0], uhat.shape()[1], uhat.shape()[2]);
    let mut gu = Tensor::zeros(uhat.shape());
    let mut gv = Tensor::zeros(v.shape());
    for ij in 0..ci * cj {
        let j = ij % cj;
        let g = grad.data()[ij];
        let u = &uhat.data()[ij * d2..(ij + 1) * d2];
        let vv = &v.data()[j * d2..(j + 1) * d2];
        for (dst, &x) in gu.data_mut()[ij * d2..(ij + 1) * d2].iter_mut().zip(vv) {
            *dst = g * x;
        }
        for (dst, &x) in gv.data_mut()[j * d2..(j + 1) * d2].iter_mut().zip(u) {
            *dst += g * x;
        }
    }
    (gu, gv)
}
