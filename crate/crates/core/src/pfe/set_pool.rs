use crate::tensor_core::Tensor;
use crate::{Error, Result};

/// Elementwise maximum over the leading (frame) axis: `[T, ...] -> [...]`.
///
/// Also returns, per output element, the frame that supplied it (first frame
/// on ties), which the backward pass uses to route gradients.
pub fn set_pool(maps: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let Some((&frames, rest)) = maps.shape().split_first() else {
        return Err(Error::shape("set_pool", "expected a frame axis"));
    };
    if rest.is_empty() {
        return Err(Error::shape("set_pool", "expected per-frame maps, got a vector"));
    }
    let width = maps.len() / frames;
    let mut out = maps.row(0).to_vec();
    let mut argmax = vec![0u32; width];
    for t in 1..frames {
        for ((o, a), &v) in out.iter_mut().zip(argmax.iter_mut()).zip(maps.row(t)) {
            if v > *o {
                *o = v;
                *a = t as u32;
            }
        }
    }
    Ok((Tensor::new(rest.to_vec(), out)?, argmax))
}

pub fn set_pool_backward(input_shape: &[usize], argmax: &[u32], grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(input_shape);
    let width = argmax.len();
    let data = out.data_mut();
    for (i, (&t, &g)) in argmax.iter().zip(grad.data()).enumerate() {
        data[t as usize * width + i] += g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_frame_is_unchanged() {
        let x = Tensor::from_fn(&[1, 2, 3, 3], |i| (i as f64).sin());
        let (y, _) = set_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn duplicates_do_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[3, 2, 2, 2], 1.0, &mut rng);
        let mut dup = x.data().to_vec();
        dup.extend_from_slice(x.row(1));
        dup.extend_from_slice(x.row(0));
        let xx = Tensor::new(vec![5, 2, 2, 2], dup).unwrap();
        assert_eq!(set_pool(&x).unwrap().0, set_pool(&xx).unwrap().0);
    }

    #[test]
    fn matches_elementwise_max_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[5, 3, 4, 4], 1.0, &mut rng);
        let (y, _) = set_pool(&x).unwrap();
        for i in 0..48 {
            let mut m = f64::NEG_INFINITY;
            for t in 0..5 {
                m = m.max(x.data()[t * 48 + i]);
            }
            assert_eq!(y.data()[i], m);
        }
    }

    #[test]
    fn gradient_goes_to_the_winning_frame() {
        let x = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let (_, arg) = set_pool(&x).unwrap();
        let g = set_pool_backward(x.shape(), &arg, &Tensor::full(&[1, 1, 2], 1.0));
        assert_eq!(g.data(), &[0.0, 1.0, 1.0, 0.0]);
    }
}
