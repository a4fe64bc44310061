use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::model::{Architecture, Variant};
use crate::pfe::PfeConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Full,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            _ => Err(Error::InvalidArgument(format!("unknown scale `{s}` (expected desk or full)"))),
        }
    }
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Full => "full",
        }
    }
}

/// Everything that controls a training run.
///
/// Serialized as flat `key = value` lines; `#` starts a comment. Keys:
///
/// | key | meaning | desk default |
/// |---|---|---|
/// | `scale` | `desk` or `full`; sets the architecture defaults below | `desk` |
/// | `pretrain_steps` | triplet steps on the extractor | 500 |
/// | `train_steps` | cross-entropy steps on the whole network | 1500 |
/// | `lr` | Adam learning rate | 0.0001 |
/// | `p`, `k` | identities per batch, sequences per identity | 4, 4 |
/// | `frames_per_sample` | frames drawn from each sequence | 16 |
/// | `margin` | triplet margin | 0.2 |
/// | `dropout` | recurrent output dropout | 0.25 |
/// | `seed` | seeds initialization and both phases | 42 |
/// | `freeze_pfe` | keep the extractor fixed in the second phase | false |
/// | `train_identities` | roster prefix used for training, 0 for all | 0 |
/// | `eval_every` | steps between evaluation hook calls, 0 for never | 0 |
/// | `conv_stack`, `bin_dim`, `slope` | extractor layout | `c16k3,p2,c16k3,p2,c32k3,c32k3`, 64, 0.01 |
/// | `hidden` | GRU size per direction | 128 |
/// | `capsules`, `capsule_dim` | primary capsules | 6, 128 |
/// | `digit_capsules`, `digit_dim` | output capsules | 8, 16 |
/// | `routing_iters` | routing iterations | 3 |
/// | `conv_kernels` | kernels of the conv-primary variant | 32 |
/// | `variant` | `full`, `uni-gru`, `no-rnn`, `no-capsule`, `conv-primary` | `full` |
/// | `n_classes` | classifier width; set from the data when training | 2 |
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub scale: Scale,
    pub pretrain_steps: usize,
    pub train_steps: usize,
    pub lr: f64,
    pub p: usize,
    pub k: usize,
    pub frames_per_sample: usize,
    pub margin: f64,
    pub dropout: f64,
    pub seed: u64,
    pub freeze_pfe: bool,
    pub train_identities: usize,
    pub eval_every: usize,
    pub arch: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            scale: Scale::Desk,
            pretrain_steps: 500,
            train_steps: 1500,
            lr: 1e-4,
            p: 4,
            k: 4,
            frames_per_sample: 16,
            margin: crate::pfe::DEFAULT_MARGIN,
            dropout: crate::recurrent::DEFAULT_DROPOUT,
            seed: 42,
            freeze_pfe: false,
            train_identities: 0,
            eval_every: 0,
            arch: Architecture::desk(2),
        }
    }

    /// Batch of 50 as 10 identities × 5 sequences, full-size network.
    pub fn full() -> Self {
        TrainConfig {
            scale: Scale::Full,
            p: 10,
            k: 5,
            arch: Architecture::full(2),
            ..Self::desk()
        }
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("p", self.p),
            ("k", self.k),
            ("frames_per_sample", self.frames_per_sample),
        ];
        if let Some((key, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{key} must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must lie in [0, 1)".into()));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::InvalidArgument("margin must be non-negative".into()));
        }
        self.arch.validate()
    }

    /// Parses config text. Keys may appear in any order; `scale` is applied
    /// first so that later keys override its defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected key = value, got `{line}`"),
            })?;
            pairs.push((i + 1, key.trim().to_string(), value.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(_, k, _)| k == "scale") {
            Some((line, _, v)) => match v.parse::<Scale>().map_err(|e| Error::Config { line: *line, message: e.to_string() })? {
                Scale::Desk => Self::desk(),
                Scale::Full => Self::full(),
            },
            None => Self::desk(),
        };
        let mut conv_stack = None;
        let mut bin_dim = None;
        for (line, key, value) in &pairs {
            let err = |message: String| Error::Config { line: *line, message };
            let bad = || err(format!("bad value `{value}` for `{key}`"));
            let int = || value.parse::<usize>().map_err(|_| bad());
            let float = || value.parse::<f64>().map_err(|_| bad());
            match key.as_str() {
                "scale" => {}
                "pretrain_steps" => cfg.pretrain_steps = int()?,
                "train_steps" => cfg.train_steps = int()?,
                "lr" => cfg.lr = float()?,
                "p" => cfg.p = int()?,
                "k" => cfg.k = int()?,
                "frames_per_sample" => cfg.frames_per_sample = int()?,
                "margin" => cfg.margin = float()?,
                "dropout" => cfg.dropout = float()?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                "freeze_pfe" => cfg.freeze_pfe = value.parse().map_err(|_| bad())?,
                "train_identities" => cfg.train_identities = int()?,
                "eval_every" => cfg.eval_every = int()?,
                "conv_stack" => conv_stack = Some(value.clone()),
                "bin_dim" => bin_dim = Some(int()?),
                "slope" => cfg.arch.pfe.slope = float()?,
                "hidden" => cfg.arch.hidden = int()?,
                "capsules" => cfg.arch.capsules = int()?,
                "capsule_dim" => cfg.arch.capsule_dim = int()?,
                "digit_capsules" => cfg.arch.digit_capsules = int()?,
                "digit_dim" => cfg.arch.digit_dim = int()?,
                "routing_iters" => cfg.arch.routing_iters = int()?,
                "conv_kernels" => cfg.arch.conv_kernels = int()?,
                "n_classes" => cfg.arch.n_classes = int()?,
                "variant" => cfg.arch.variant = value.parse::<Variant>().map_err(|e| err(e.to_string()))?,
                _ => return Err(err(format!("unknown key `{key}`"))),
            }
        }
        if conv_stack.is_some() || bin_dim.is_some() {
            let slope = cfg.arch.pfe.slope;
            let stack = conv_stack.unwrap_or_else(|| cfg.arch.pfe.stack_string());
            cfg.arch.pfe = PfeConfig::parse(&stack, bin_dim.unwrap_or(cfg.arch.pfe.bin_dim))?;
            cfg.arch.pfe.slope = slope;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let a = &self.arch;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("scale", self.scale.name().into());
        put("pretrain_steps", self.pretrain_steps.to_string());
        put("train_steps", self.train_steps.to_string());
        put("lr", format!("{:?}", self.lr));
        put("p", self.p.to_string());
        put("k", self.k.to_string());
        put("frames_per_sample", self.frames_per_sample.to_string());
        put("margin", format!("{:?}", self.margin));
        put("dropout", format!("{:?}", self.dropout));
        put("seed", self.seed.to_string());
        put("freeze_pfe", self.freeze_pfe.to_string());
        put("train_identities", self.train_identities.to_string());
        put("eval_every", self.eval_every.to_string());
        put("conv_stack", a.pfe.stack_string());
        put("bin_dim", a.pfe.bin_dim.to_string());
        put("slope", format!("{:?}", a.pfe.slope));
        put("hidden", a.hidden.to_string());
        put("capsules", a.capsules.to_string());
        put("capsule_dim", a.capsule_dim.to_string());
        put("digit_capsules", a.digit_capsules.to_string());
        put("digit_dim", a.digit_dim.to_string());
        put("routing_iters", a.routing_iters.to_string());
        put("conv_kernels", a.conv_kernels.to_string());
        put("variant", a.variant.name().into());
        put("n_classes", a.n_classes.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = TrainConfig::desk();
        cfg.lr = 3e-4;
        cfg.freeze_pfe = true;
        cfg.arch.variant = Variant::ConvPrimary;
        cfg.arch.pfe = PfeConfig::parse("c8k3,p4", 16).unwrap();
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(TrainConfig::parse(&TrainConfig::full().to_text()).unwrap(), TrainConfig::full());
    }

    #[test]
    fn scale_then_overrides() {
        let cfg = TrainConfig::parse("p = 2\n# comment\nscale = full   # trailing\n").unwrap();
        assert_eq!(cfg.scale, Scale::Full);
        assert_eq!((cfg.p, cfg.k), (2, 5));
        assert_eq!(cfg.arch.pfe.bin_dim, 256);
    }

    #[test]
    fn errors_name_the_line() {
        let e = TrainConfig::parse("lr = 1e-4\nbogus = 1\n").unwrap_err();
        assert!(matches!(e, Error::Config { line: 2, .. }), "{e}");
        assert!(TrainConfig::parse("lr = -1").is_err());
        assert!(TrainConfig::parse("p").is_err());
        assert!(TrainConfig::parse("variant = nope").is_err());
    }
}
