//! 2-D cross-correlation (no kernel flip) over `[N, C, H, W]` batches,
//! lowered to a matrix product per sample.

use super::dense::gemm;
use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernels: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[batch, channels, height, width], &[kernels, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and kernel, got {input:?} and {kernel:?}"),
            ));
        };
        if kc != channels {
            return Err(Error::shape(
                "conv2d",
                format!("input has {channels} channels but kernel expects {kc}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if height + 2 * padding < kh || width + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("{kh}x{kw} kernel does not fit {height}x{width} input with padding {padding}"),
            ));
        }
        Ok(Geometry {
            batch,
            channels,
            height,
            width,
            kernels,
            kh,
            kw,
            stride,
            padding,
            out_h: (height + 2 * padding - kh) / stride + 1,
            out_w: (width + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Source offset inside one sample for patch row `r` and output position `pos`,
    /// or `None` where the window hangs over the zero padding.
    #[inline]
    fn source(&self, r: usize, pos: usize) -> Option<usize> {
        let c = r / (self.kh * self.kw);
        let ky = (r / self.kw) % self.kh;
        let kx = r % self.kw;
        let oy = pos / self.out_w;
        let ox = pos % self.out_w;
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then(|| (c * self.height + y) * self.width + x)
    }

    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        let positions = self.positions();
        for r in 0..self.patch() {
            let row = &mut cols[r * positions..(r + 1) * positions];
            for (pos, dst) in row.iter_mut().enumerate() {
                *dst = self.source(r, pos).map_or(0.0, |s| sample[s]);
            }
        }
    }

    fn col2im(&self, cols: &[f64], sample: &mut [f64]) {
        let positions = self.positions();
        for r in 0..self.patch() {
            let row = &cols[r * positions..(r + 1) * positions];
            for (pos, &g) in row.iter().enumerate() {
                if let Some(s) = self.source(r, pos) {
                    sample[s] += g;
                }
            }
        }
    }
}

pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = Geometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let (patch, positions) = (g.patch(), g.positions());
    let mut cols = vec![0.0; patch * positions];
    let out_sample = g.kernels * positions;
    let mut out = vec![0.0; g.batch * out_sample];
    for n in 0..g.batch {
        let sample = &input.data()[n * g.in_sample()..(n + 1) * g.in_sample()];
        g.im2col(sample, &mut cols);
        gemm(
            g.kernels,
            patch,
            positions,
            kernel.data(),
            false,
            &cols,
            false,
            0.0,
            &mut out[n * out_sample..(n + 1) * out_sample],
        );
    }
    Tensor::new(vec![g.batch, g.kernels, g.out_h, g.out_w], out)
}

/// Returns `(grad_input, grad_kernel)`; the input gradient is skipped when
/// `need_input` is false.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let g = Geometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let expected = [g.batch, g.kernels, g.out_h, g.out_w];
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!("gradient {:?} vs output {expected:?}", grad_out.shape()),
        ));
    }
    let (patch, positions) = (g.patch(), g.positions());
    let out_sample = g.kernels * positions;
    let mut cols = vec![0.0; patch * positions];
    let mut dcols = vec![0.0; patch * positions];
    let mut dkernel = vec![0.0; kernel.len()];
    let mut dinput = need_input.then(|| vec![0.0; input.len()]);
    for n in 0..g.batch {
        let sample = &input.data()[n * g.in_sample()..(n + 1) * g.in_sample()];
        let dout = &grad_out.data()[n * out_sample..(n + 1) * out_sample];
        g.im2col(sample, &mut cols);
        gemm(g.kernels, positions, patch, dout, false, &cols, true, 1.0, &mut dkernel);
        if let Some(dinput) = dinput.as_mut() {
            gemm(patch, g.kernels, positions, kernel.data(), true, dout, false, 0.0, &mut dcols);
            g.col2im(&dcols, &mut dinput[n * g.in_sample()..(n + 1) * g.in_sample()]);
        }
    }
    let dinput = dinput
        .map(|d| Tensor::new(input.shape().to_vec(), d))
        .transpose()?;
    Ok((dinput, Tensor::new(kernel.shape().to_vec(), dkernel)?))
}
