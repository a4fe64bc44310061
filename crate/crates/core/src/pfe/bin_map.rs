use crate::tensor_core::Tensor;
use crate::{Error, Result};

/// Independent affine map per bin: `out[b] = bins[b] · weight[b] + bias[b]`
/// with `bins: [B, D_in]`, `weight: [B, D_in, D_out]`, `bias: [B, D_out]`.
pub fn bin_linear(bins: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (&[n, d_in], &[wn, w_in, d_out]) = (bins.shape(), weight.shape()) else {
        return Err(Error::shape(
            "bin_map",
            format!("bins {:?}, weight {:?}", bins.shape(), weight.shape()),
        ));
    };
    if wn != n || w_in != d_in || bias.shape() != [n, d_out] {
        return Err(Error::shape(
            "bin_map",
            format!(
                "bins {:?}, weight {:?}, bias {:?}",
                bins.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = bias.data().to_vec();
    for b in 0..n {
        let x = bins.row(b);
        let w = weight.row(b);
        let o = &mut out[b * d_out..(b + 1) * d_out];
        for (i, &xi) in x.iter().enumerate() {
            for (acc, &wv) in o.iter_mut().zip(&w[i * d_out..(i + 1) * d_out]) {
                *acc += xi * wv;
            }
        }
    }
    Tensor::new(vec![n, d_out], out)
}

/// Returns `(grad_bins, grad_weight, grad_bias)`.
pub fn bin_linear_backward(bins: &Tensor, weight: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, d_in, d_out) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    let mut gx = Tensor::zeros(bins.shape());
    let mut gw = Tensor::zeros(weight.shape());
    for b in 0..n {
        let x = bins.row(b);
        let w = weight.row(b);
        let g = grad.row(b);
        let gw_b = &mut gw.data_mut()[b * d_in * d_out..(b + 1) * d_in * d_out];
        let mut gx_b = vec![0.0; d_in];
        for i in 0..d_in {
            let w_row = &w[i * d_out..(i + 1) * d_out];
            let gw_row = &mut gw_b[i * d_out..(i + 1) * d_out];
            let mut acc = 0.0;
            for ((gw_v, &w_v), &g_v) in gw_row.iter_mut().zip(w_row).zip(g) {
                *gw_v = x[i] * g_v;
                acc += w_v * g_v;
            }
            gx_b[i] = acc;
        }
        gx.data_mut()[b * d_in..(b + 1) * d_in].copy_from_slice(&gx_b);
    }
    (gx, gw, grad.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights_return_the_bins() {
        let bins = Tensor::from_fn(&[31, 4], |i| i as f64 * 0.1);
        let w = Tensor::from_fn(&[31, 4, 4], |i| if (i % 16) % 5 == 0 { 1.0 } else { 0.0 });
        let out = bin_linear(&bins, &w, &Tensor::zeros(&[31, 4])).unwrap();
        assert_eq!(out, bins);
    }

    #[test]
    fn zero_weights_give_bias() {
        let bias = Tensor::from_fn(&[31, 3], |i| i as f64);
        let out = bin_linear(&Tensor::full(&[31, 2], 5.0), &Tensor::zeros(&[31, 2, 3]), &bias).unwrap();
        assert_eq!(out, bias);
    }

    #[test]
    fn matches_per_bin_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let bins = Tensor::uniform(&[5, 3], 1.0, &mut rng);
        let w = Tensor::uniform(&[5, 3, 2], 1.0, &mut rng);
        let bias = Tensor::uniform(&[5, 2], 1.0, &mut rng);
        let out = bin_linear(&bins, &w, &bias).unwrap();
        for b in 0..5 {
            for o in 0..2 {
                let mut acc = bias.data()[b * 2 + o];
                for i in 0..3 {
                    acc += bins.data()[b * 3 + i] * w.data()[(b * 3 + i) * 2 + o];
                }
                assert!((out.data()[b * 2 + o] - acc).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        assert!(bin_linear(&Tensor::zeros(&[31, 2]), &Tensor::zeros(&[30, 2, 3]), &Tensor::zeros(&[31, 3])).is_err());
    }
}
