//! Partial feature extraction: a per-frame conv stack, set pooling over
//! frames, a horizontal pyramid of 31 strip bins and an independent linear
//! map per bin. Also hosts the batch-all triplet loss used to pretrain it.

pub mod bin_map;
pub mod hpm;
pub mod set_pool;
pub mod triplet;

use std::fmt;

pub use bin_map::bin_linear;
pub use hpm::{hpm_split, DEFAULT_SCALES};
pub use set_pool::set_pool;
pub use triplet::{triplet_loss_ba, TripletLoss, DEFAULT_MARGIN};

use crate::model::{ParamBinder, ParamSpec};
use crate::tensor_core::{Tape, Tensor, Var};
use crate::{Error, ModelParams, Result};

/// Number of bins produced by the default pyramid.
pub const BIN_COUNT: usize = 31;

/// Side length of a preprocessed silhouette.
pub const FRAME_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvLayer {
    /// Stride-1 convolution with `kernel / 2` zero padding, then leaky ReLU.
    Conv { channels: usize, kernel: usize },
    /// Non-overlapping max pooling.
    Pool { window: usize },
}

impl fmt::Display for ConvLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConvLayer::Conv { channels, kernel } => write!(f, "c{channels}k{kernel}"),
            ConvLayer::Pool { window } => write!(f, "p{window}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfeConfig {
    pub layers: Vec<ConvLayer>,
    /// Output dimension `d` of every bin.
    pub bin_dim: usize,
    pub slope: f64,
}

impl PfeConfig {
    /// Four conv layers (1→16→16→32→32) with two 2×2 pools; `d = 64`.
    pub fn desk() -> Self {
        Self::parse("c16k3,p2,c16k3,p2,c32k3,c32k3", 64).expect("valid desk stack")
    }

    /// Six conv layers with two pools; `d = 256`.
    pub fn full() -> Self {
        Self::parse("c32k5,c32k3,p2,c64k3,c64k3,p2,c128k3,c128k3", 256).expect("valid full stack")
    }

    /// Parses a comma-separated stack such as `c16k3,p2,c32k3`.
    pub fn parse(stack: &str, bin_dim: usize) -> Result<Self> {
        let bad = |item: &str| Error::InvalidArgument(format!("bad conv stack item `{item}`"));
        let mut layers = Vec::new();
        for item in stack.split(',').map(str::trim) {
            let layer = if let Some(rest) = item.strip_prefix('p') {
                ConvLayer::Pool { window: rest.parse().map_err(|_| bad(item))? }
            } else if let Some(rest) = item.strip_prefix('c') {
                let (c, k) = rest.split_once('k').ok_or_else(|| bad(item))?;
                ConvLayer::Conv {
                    channels: c.parse().map_err(|_| bad(item))?,
                    kernel: k.parse().map_err(|_| bad(item))?,
                }
            } else {
                return Err(bad(item));
            };
            match layer {
                ConvLayer::Pool { window: 0 } | ConvLayer::Conv { channels: 0, .. } => return Err(bad(item)),
                ConvLayer::Conv { kernel, .. } if kernel % 2 == 0 => return Err(bad(item)),
                _ => layers.push(layer),
            }
        }
        if !layers.iter().any(|l| matches!(l, ConvLayer::Conv { .. })) {
            return Err(Error::InvalidArgument("conv stack has no conv layer".into()));
        }
        if bin_dim == 0 {
            return Err(Error::InvalidArgument("bin_dim must be positive".into()));
        }
        Ok(PfeConfig { layers, bin_dim, slope: 0.01 })
    }

    pub fn stack_string(&self) -> String {
        self.layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }

    /// Channels of the final conv map.
    pub fn out_channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                ConvLayer::Conv { channels, .. } => Some(*channels),
                ConvLayer::Pool { .. } => None,
            })
            .expect("validated")
    }

    /// `(C, H', W')` of the conv map for a `FRAME_SIZE` input.
    pub fn map_shape(&self) -> [usize; 3] {
        let side = self.layers.iter().fold(FRAME_SIZE, |s, l| match l {
            ConvLayer::Pool { window } => s / window,
            ConvLayer::Conv { .. } => s,
        });
        [self.out_channels(), side, side]
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut in_ch = 1;
        let mut conv = 0;
        for layer in &self.layers {
            if let ConvLayer::Conv { channels, kernel } = *layer {
                let area = kernel * kernel;
                specs.push(ParamSpec::xavier(
                    format!("pfe.conv{conv}.kernel"),
                    &[channels, in_ch, kernel, kernel],
                    in_ch * area,
                    channels * area,
                ));
                in_ch = channels;
                conv += 1;
            }
        }
        let raw = 2 * in_ch;
        specs.push(ParamSpec::xavier("pfe.bins.weight", &[BIN_COUNT, raw, self.bin_dim], raw, self.bin_dim));
        specs.push(ParamSpec::zeros("pfe.bins.bias", &[BIN_COUNT, self.bin_dim]));
        specs
    }
}

/// Per-frame conv maps `[T, C, H', W']`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMapSet {
    pub maps: Tensor,
}

/// The 31 mapped bins as a `[31, d]` tensor, scale-major and top strip first.
#[derive(Debug, Clone, PartialEq)]
pub struct BinFeatureSet {
    pub bins: Tensor,
}

impl BinFeatureSet {
    pub fn len(&self) -> usize {
        self.bins.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.bins.shape()[1]
    }

    pub fn bin(&self, i: usize) -> &[f64] {
        self.bins.row(i)
    }

    /// Number of strips at the scale bin `i` belongs to.
    pub fn scale_of(i: usize) -> usize {
        hpm::bin_scales(&DEFAULT_SCALES)[i]
    }
}

fn check_frames(frames: &Tensor) -> Result<()> {
    match frames.shape() {
        [_, 1, _, _] => Ok(()),
        other => Err(Error::shape("pfe", format!("expected frames [T, 1, H, W], got {other:?}"))),
    }
}

/// Applies the conv stack to every frame.
pub fn frame_maps_tape<'p>(
    tape: &mut Tape<'p>,
    binder: &mut ParamBinder<'p>,
    cfg: &PfeConfig,
    frames: Var,
) -> Result<Var> {
    check_frames(tape.value(frames))?;
    let mut x = frames;
    let mut conv = 0;
    for layer in &cfg.layers {
        x = match *layer {
            ConvLayer::Conv { kernel, .. } => {
                let k = binder.var(tape, &format!("pfe.conv{conv}.kernel"))?;
                conv += 1;
                let y = tape.conv2d(x, k, 1, kernel / 2)?;
                tape.leaky_relu(y, cfg.slope)
            }
            ConvLayer::Pool { window } => tape.max_pool2d(x, window, window)?,
        };
    }
    Ok(x)
}

/// Full block on a tape: frames `[T, 1, H, W]` to bins `[31, d]`.
pub fn pfe_tape<'p>(
    tape: &mut Tape<'p>,
    binder: &mut ParamBinder<'p>,
    cfg: &PfeConfig,
    frames: Var,
) -> Result<Var> {
    let maps = frame_maps_tape(tape, binder, cfg, frames)?;
    let pooled = tape.set_pool(maps)?;
    let raw = tape.hpm_split(pooled, &DEFAULT_SCALES)?;
    let w = binder.var(tape, "pfe.bins.weight")?;
    let b = binder.var(tape, "pfe.bins.bias")?;
    tape.bin_linear(raw, w, b)
}

pub fn frame_maps(frames: &Tensor, params: &ModelParams, cfg: &PfeConfig) -> Result<FrameMapSet> {
    let mut tape = Tape::new();
    let mut binder = ParamBinder::frozen(params, &[""]);
    let x = tape.constant(frames.clone());
    let maps = frame_maps_tape(&mut tape, &mut binder, cfg, x)?;
    Ok(FrameMapSet { maps: tape.value(maps).clone() })
}

/// Frames `[T, 1, H, W]` to the 31 mapped bins. Invariant to frame order
/// and frame multiplicity.
pub fn pfe_forward(frames: &Tensor, params: &ModelParams, cfg: &PfeConfig) -> Result<BinFeatureSet> {
    let mut tape = Tape::new();
    let mut binder = ParamBinder::frozen(params, &[""]);
    let x = tape.constant(frames.clone());
    let bins = pfe_tape(&mut tape, &mut binder, cfg, x)?;
    let bins = tape.value(bins).clone();
    bins.ensure_finite("pfe_forward")?;
    Ok(BinFeatureSet { bins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> PfeConfig {
        PfeConfig::parse("c4k3,p2,c4k3,p4", 8).unwrap()
    }

    fn frames(t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[t, 1, 64, 64], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
    }

    #[test]
    fn stack_parsing_roundtrips() {
        let cfg = PfeConfig::desk();
        assert_eq!(cfg.stack_string(), "c16k3,p2,c16k3,p2,c32k3,c32k3");
        assert_eq!(cfg.map_shape(), [32, 16, 16]);
        assert_eq!(PfeConfig::full().layers.len(), 8);
        for bad in ["", "c16", "x3", "c16k2", "p0", "p2"] {
            assert!(PfeConfig::parse(bad, 8).is_err(), "{bad}");
        }
    }

    #[test]
    fn always_31_bins() {
        let cfg = small();
        let params = ModelParams::init(&cfg.param_specs(), 3).unwrap();
        for t in [1, 2, 5] {
            let out = pfe_forward(&frames(t, t as u64), &params, &cfg).unwrap();
            assert_eq!(out.bins.shape(), &[31, 8]);
        }
    }

    #[test]
    fn invariant_to_order_and_duplication() {
        let cfg = small();
        let params = ModelParams::init(&cfg.param_specs(), 4).unwrap();
        let f = frames(4, 9);
        let base = pfe_forward(&f, &params, &cfg).unwrap();
        let frame = 64 * 64;
        let mut order: Vec<usize> = vec![2, 0, 3, 1, 1, 3];
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let data = order
            .iter()
            .flat_map(|&i| f.data()[i * frame..(i + 1) * frame].to_vec())
            .collect();
        let g = Tensor::new(vec![order.len(), 1, 64, 64], data).unwrap();
        assert_eq!(pfe_forward(&g, &params, &cfg).unwrap(), base);
    }

    #[test]
    fn frame_maps_shape() {
        let cfg = small();
        let params = ModelParams::init(&cfg.param_specs(), 4).unwrap();
        let maps = frame_maps(&frames(3, 2), &params, &cfg).unwrap();
        assert_eq!(maps.maps.shape(), &[3, 4, 8, 8]);
        assert!(frame_maps(&Tensor::zeros(&[3, 2, 64, 64]), &params, &cfg).is_err());
    }

    #[test]
    fn scale_tags() {
        assert_eq!(BinFeatureSet::scale_of(0), 1);
        assert_eq!(BinFeatureSet::scale_of(2), 2);
        assert_eq!(BinFeatureSet::scale_of(30), 16);
    }
}
