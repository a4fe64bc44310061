//! Horizontal pyramid split of a pooled gait map into multi-scale strip bins.

use crate::tensor_core::Tensor;
use crate::{Error, Result};

pub const DEFAULT_SCALES: [usize; 5] = [1, 2, 4, 8, 16];

/// Total number of bins across `scales`.
pub fn bin_count(scales: &[usize]) -> usize {
    scales.iter().sum()
}

/// Scale index for every bin, in output order.
pub fn bin_scales(scales: &[usize]) -> Vec<usize> {
    scales
        .iter()
        .flat_map(|&s| std::iter::repeat(s).take(s))
        .collect()
}

fn padded_height(height: usize, scales: &[usize]) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let lcm = scales.iter().fold(1, |acc, &s| acc / gcd(acc, s) * s);
    height.div_ceil(lcm) * lcm
}

/// Marks a maximum taken from the zero padding below the map.
const PADDING: u32 = u32::MAX;

/// Splits `map: [C, H, W]` into horizontal strips at each scale and reduces
/// every strip to `max ++ mean` over its rows and columns per channel.
///
/// Bins are ordered scale-major, top strip first. `H` is zero-padded at the
/// bottom up to a multiple of every scale. Returns `[bins, 2C]` plus the
/// argmax bookkeeping for the backward pass.
pub fn hpm_split(map: &Tensor, scales: &[usize]) -> Result<(Tensor, Vec<u32>)> {
    let &[channels, height, width] = map.shape() else {
        return Err(Error::shape("hpm_split", format!("expected [C, H, W], got {:?}", map.shape())));
    };
    if scales.is_empty() || scales.contains(&0) {
        return Err(Error::InvalidArgument(format!("bad scales {scales:?}")));
    }
    let padded = padded_height(height, scales);
    let bins = bin_count(scales);
    let mut out = Vec::with_capacity(bins * 2 * channels);
    let mut argmax = Vec::with_capacity(bins * channels);
    let x = map.data();
    for &s in scales {
        let strip = padded / s;
        for k in 0..s {
            let rows = k * strip..(k + 1) * strip;
            let mut means = Vec::with_capacity(channels);
            for c in 0..channels {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = PADDING;
                let mut total = 0.0;
                for y in rows.clone() {
                    if y >= height {
                        if best < 0.0 {
                            best = 0.0;
                            best_idx = PADDING;
                        }
                        continue;
                    }
                    let base = (c * height + y) * width;
                    for (i, &v) in x[base..base + width].iter().enumerate() {
                        total += v;
                        if v > best {
                            best = v;
                            best_idx = (base + i) as u32;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
                means.push(total / (strip * width) as f64);
            }
            out.extend(means);
        }
    }
    Ok((Tensor::new(vec![bins, 2 * channels], out)?, argmax))
}

pub fn hpm_backward(input_shape: &[usize], scales: &[usize], argmax: &[u32], grad: &Tensor) -> Tensor {
    let (channels, height, width) = (input_shape[0], input_shape[1], input_shape[2]);
    let padded = padded_height(height, scales);
    let mut out = Tensor::zeros(input_shape);
    let dx = out.data_mut();
    let mut bin = 0;
    for &s in scales {
        let strip = padded / s;
        for k in 0..s {
            let g = grad.row(bin);
            for c in 0..channels {
                let idx = argmax[bin * channels + c];
                if idx != PADDING {
                    dx[idx as usize] += g[c];
                }
                let share = g[channels + c] / (strip * width) as f64;
                for y in k * strip..((k + 1) * strip).min(height) {
                    let base = (c * height + y) * width;
                    for v in &mut dx[base..base + width] {
                        *v += share;
                    }
                }
            }
            bin += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn thirty_one_bins_by_default() {
        assert_eq!(bin_count(&DEFAULT_SCALES), 31);
        let (bins, _) = hpm_split(&Tensor::zeros(&[3, 16, 4]), &DEFAULT_SCALES).unwrap();
        assert_eq!(bins.shape(), &[31, 6]);
        let counts: Vec<usize> = DEFAULT_SCALES
            .iter()
            .map(|&s| bin_scales(&DEFAULT_SCALES).iter().filter(|&&t| t == s).count())
            .collect();
        assert_eq!(counts, vec![1, 2, 4, 8, 16]);
    }

    #[test]
    fn constant_map() {
        let (bins, _) = hpm_split(&Tensor::full(&[2, 16, 3], 0.75), &DEFAULT_SCALES).unwrap();
        assert!(bins.data().iter().all(|&v| v == 0.75));
    }

    /// Reduces one strip with explicit loops.
    fn strip_oracle(map: &Tensor, c: usize, y0: usize, y1: usize) -> (f64, f64) {
        let [_, h, w] = map.shape().try_into().unwrap();
        let mut best = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for y in y0..y1 {
            for x in 0..w {
                let v = map.data()[(c * h + y) * w + x];
                best = best.max(v);
                sum += v;
            }
        }
        (best, sum / ((y1 - y0) * w) as f64)
    }

    #[test]
    fn matches_strip_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let map = Tensor::uniform(&[3, 32, 5], 1.0, &mut rng);
        let (bins, _) = hpm_split(&map, &DEFAULT_SCALES).unwrap();
        let mut b = 0;
        for s in DEFAULT_SCALES {
            let strip = 32 / s;
            for k in 0..s {
                for c in 0..3 {
                    let (mx, mean) = strip_oracle(&map, c, k * strip, (k + 1) * strip);
                    assert_eq!(bins.row(b)[c], mx);
                    assert!((bins.row(b)[3 + c] - mean).abs() < 1e-15);
                }
                b += 1;
            }
        }
    }

    #[test]
    fn scale_one_covers_all_fine_strips() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let map = Tensor::uniform(&[2, 16, 4], 1.0, &mut rng);
        let (bins, _) = hpm_split(&map, &DEFAULT_SCALES).unwrap();
        for c in 0..2 {
            let fine_max = (15..31).map(|b| bins.row(b)[c]).fold(f64::NEG_INFINITY, f64::max);
            let fine_mean = (15..31).map(|b| bins.row(b)[2 + c]).sum::<f64>() / 16.0;
            assert_eq!(bins.row(0)[c], fine_max);
            assert!((bins.row(0)[2 + c] - fine_mean).abs() < 1e-15);
        }
    }

    #[test]
    fn indivisible_height_pads_with_zeros() {
        let map = Tensor::full(&[1, 12, 2], -1.0);
        let (bins, _) = hpm_split(&map, &DEFAULT_SCALES).unwrap();
        // the bottom scale-16 strips lie entirely in padding
        assert_eq!(bins.row(30), &[0.0, 0.0]);
        // the whole-map bin sees the padding too
        assert_eq!(bins.row(0)[0], 0.0);
        assert!((bins.row(0)[1] + 0.75).abs() < 1e-15);
    }
}
