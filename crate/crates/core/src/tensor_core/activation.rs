use super::Tensor;

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Tensor, slope: f64, grad: &Tensor) -> Tensor {
    let mut out = grad.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g *= slope;
        }
    }
    out
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_scales_negatives() {
        let x = Tensor::new(vec![3], vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.01).data(), &[-0.02, 0.0, 3.0]);
        let g = leaky_relu_backward(&x, 0.01, &Tensor::full(&[3], 1.0));
        assert_eq!(g.data(), &[0.01, 0.01, 1.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
