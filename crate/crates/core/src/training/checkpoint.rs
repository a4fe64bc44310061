//! Binary checkpoint container.
//!
//! ```text
//! "GCAP"  u32 version  u32 config_len  config (UTF-8 key = value lines)
//! u32 entry_count
//! per entry: u32 path_len  path (UTF-8)  u8 rank  u64 extents[rank]  f32 data[]
//! ```
//!
//! All integers and floats are little-endian; entries are in path order.

use std::path::Path;

use super::TrainConfig;
use crate::tensor_core::Tensor;
use crate::{Error, ModelParams, Result};

pub const MAGIC: &[u8; 4] = b"GCAP";
pub const VERSION: u32 = 1;

/// Trained parameters with the configuration that produced them. Values are
/// held at `f32` precision so an in-memory checkpoint equals its saved form.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    params: ModelParams,
}

impl Checkpoint {
    /// Rounds `params` to `f32` and checks them against the architecture.
    pub fn new(config: TrainConfig, mut params: ModelParams) -> Result<Self> {
        params.validate(&config.arch.param_specs())?;
        params.round_to_f32();
        Ok(Checkpoint { config, params })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = self.config.to_text();
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (path, t) in self.params.iter() {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
            return Err(Error::NotACheckpoint);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: VERSION });
        }
        let len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(len, "config")?)
            .map_err(|_| Error::InvalidArgument("checkpoint config is not UTF-8".into()))?;
        let config = TrainConfig::parse(text)?;
        let specs = config.arch.param_specs();
        let count = r.u32("entry count")?;
        let mut params = ModelParams::new();
        for _ in 0..count {
            let len = r.u32("path length")? as usize;
            let path = std::str::from_utf8(r.take(len, "path")?)
                .map_err(|_| Error::InvalidArgument("parameter path is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u64("extent").map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let Some(spec) = specs.iter().find(|s| s.path == path) else {
                return Err(Error::UnknownParameter(path));
            };
            if spec.shape != shape {
                return Err(Error::ParameterShape { path, found: shape, expected: spec.shape.clone() });
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4, "parameter data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            params.insert(path, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::InvalidArgument("trailing bytes after checkpoint".into()));
        }
        params.validate(&specs)?;
        Ok(Checkpoint { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Fails when this checkpoint's architecture differs from `expected`,
    /// naming the first parameter that disagrees.
    pub fn check_architecture(&self, expected: &crate::model::Architecture) -> Result<()> {
        self.params.validate(&expected.param_specs())
    }
}

pub fn save_checkpoint(params: &ModelParams, config: &TrainConfig, path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::new(config.clone(), params.clone())?;
    ckpt.save(path)?;
    Ok(ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::pfe::PfeConfig;

    fn small() -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.arch.pfe = PfeConfig::parse("c2k3,p4", 4).unwrap();
        cfg.arch.hidden = 4;
        cfg.arch.capsules = 2;
        cfg.arch.capsule_dim = 3;
        cfg.arch.n_classes = 3;
        cfg
    }

    fn ckpt() -> Checkpoint {
        let cfg = small();
        let params = cfg.arch.init(1).unwrap();
        Checkpoint::new(cfg, params).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let c = ckpt();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs() {
        let mut bytes = ckpt().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..2]), Err(Error::NotACheckpoint)));
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CheckpointVersion { found: 9, .. })));
        bytes[0] = b'X';
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string(), "not a checkpoint");
    }

    #[test]
    fn unknown_path_is_rejected() {
        let c = ckpt();
        let mut cfg = c.config.clone();
        cfg.arch.variant = Variant::NoCapsule;
        let bad = Checkpoint { config: cfg, params: c.params.clone() };
        assert!(matches!(Checkpoint::from_bytes(&bad.to_bytes()), Err(Error::UnknownParameter(p)) if p.starts_with("caps.")));
    }

    #[test]
    fn architecture_mismatch_names_shapes() {
        let c = ckpt();
        let mut other = c.config.arch.clone();
        other.hidden = 5;
        let msg = c.check_architecture(&other).unwrap_err().to_string();
        assert!(msg.contains("shape"), "{msg}");
    }
}
