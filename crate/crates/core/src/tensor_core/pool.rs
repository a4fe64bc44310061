use super::Tensor;
use crate::{Error, Result};

/// Max pooling over `[N, C, H, W]`.
///
/// Returns the pooled tensor together with, for every output cell, the flat
/// input index that produced it. Ties resolve to the first position in
/// row-major scan order.
pub fn max_pool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let &[n, c, h, w] = input.shape() else {
        return Err(Error::shape("max_pool2d", format!("expected 4-d input, got {:?}", input.shape())));
    };
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument("max_pool2d window and stride must be positive".into()));
    }
    if h < window || w < window {
        return Err(Error::shape(
            "max_pool2d",
            format!("window {window} larger than spatial extent {h}x{w}"),
        ));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for idx in row..row + window {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

/// Routes each output gradient back to the input position recorded in `argmax`.
pub fn max_pool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&idx, &d) in argmax.iter().zip(grad_out.data()) {
        g[idx] += d;
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_gives_constant_output() {
        let x = Tensor::full(&[2, 3, 4, 4], 1.5);
        let (y, _) = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn picks_the_window_maximum() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn ties_go_to_first_in_scan_order() {
        let x = Tensor::full(&[1, 1, 2, 2], 0.0);
        let (_, arg) = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(arg, vec![0]);
        let g = max_pool2d_backward(x.shape(), &arg, &Tensor::full(&[1, 1, 1, 1], 1.0));
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matches_per_block_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(&[1, 1, 4, 4], 1.0, &mut rng);
        let (y, _) = max_pool2d(&x, 2, 2).unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data()[(2 * by + dy) * 4 + 2 * bx + dx]);
                    }
                }
                assert_eq!(y.data()[by * 2 + bx], m);
            }
        }
    }

    #[test]
    fn batch_duplication_is_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[1, 2, 6, 6], 1.0, &mut rng);
        let mut doubled = x.data().to_vec();
        doubled.extend_from_slice(x.data());
        let xx = Tensor::new(vec![2, 2, 6, 6], doubled).unwrap();
        let (y, _) = max_pool2d(&x, 2, 2).unwrap();
        let (yy, _) = max_pool2d(&xx, 2, 2).unwrap();
        assert_eq!(&yy.data()[..y.len()], y.data());
        assert_eq!(&yy.data()[y.len()..], y.data());
    }

    #[test]
    fn window_larger_than_input_fails() {
        assert!(max_pool2d(&Tensor::zeros(&[1, 1, 1, 3]), 2, 2).is_err());
    }
}
