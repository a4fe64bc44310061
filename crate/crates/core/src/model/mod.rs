//! The composed network: extractor, recurrent block, capsule block and
//! softmax classifier, plus the reduced variants used for ablation.

mod params;

use std::fmt;
use std::str::FromStr;

pub use params::{Init, ModelParams, ParamBinder, ParamSpec};

use crate::capsule::{self, fold_shape};
use crate::pfe::{self, PfeConfig, BIN_COUNT};
use crate::recurrent;
use crate::tensor_core::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Every block.
    Full,
    /// Forward-direction GRU only.
    UniGru,
    /// Bins go straight into the capsule projection.
    NoRnn,
    /// Flattened recurrent context goes straight into the classifier.
    NoCapsule,
    /// A conv layer over folded context maps precedes the capsule projection.
    ConvPrimary,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::UniGru,
        Variant::NoRnn,
        Variant::NoCapsule,
        Variant::ConvPrimary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::UniGru => "uni-gru",
            Variant::NoRnn => "no-rnn",
            Variant::NoCapsule => "no-capsule",
            Variant::ConvPrimary => "conv-primary",
        }
    }

    pub fn has_rnn(self) -> bool {
        self != Variant::NoRnn
    }

    pub fn has_capsules(self) -> bool {
        self != Variant::NoCapsule
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub pfe: PfeConfig,
    /// Hidden size of each GRU direction.
    pub hidden: usize,
    /// Number of primary capsules `C`.
    pub capsules: usize,
    /// Primary capsule size `D1`.
    pub capsule_dim: usize,
    /// Number of digit capsules `J`.
    pub digit_capsules: usize,
    /// Digit capsule size `D2`.
    pub digit_dim: usize,
    pub routing_iters: usize,
    /// Kernels of the conv layer in the conv-primary variant.
    pub conv_kernels: usize,
    pub n_classes: usize,
    pub variant: Variant,
}

impl Architecture {
    pub fn desk(n_classes: usize) -> Self {
        Architecture {
            pfe: PfeConfig::desk(),
            hidden: 128,
            capsules: 6,
            capsule_dim: 128,
            digit_capsules: 8,
            digit_dim: 16,
            routing_iters: capsule::DEFAULT_ROUTING_ITERS,
            conv_kernels: 32,
            n_classes,
            variant: Variant::Full,
        }
    }

    pub fn full(n_classes: usize) -> Self {
        Architecture {
            pfe: PfeConfig::full(),
            ..Self::desk(n_classes)
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Architecture { variant, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("capsules", self.capsules),
            ("capsule_dim", self.capsule_dim),
            ("digit_capsules", self.digit_capsules),
            ("digit_dim", self.digit_dim),
            ("routing_iters", self.routing_iters),
            ("conv_kernels", self.conv_kernels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument("n_classes must be at least 2".into()));
        }
        if self.variant == Variant::ConvPrimary {
            let (rows, cols) = fold_shape(self.context_dim())?;
            if rows < 3 {
                return Err(Error::InvalidArgument(format!(
                    "context width {} folds to {rows}x{cols}, too small for a 3x3 conv",
                    self.context_dim()
                )));
            }
        }
        Ok(())
    }

    /// Width of each bin's context row.
    pub fn context_dim(&self) -> usize {
        match self.variant {
            Variant::NoRnn => self.pfe.bin_dim,
            Variant::UniGru => self.hidden,
            _ => 2 * self.hidden,
        }
    }

    /// Length of the vector used for gallery matching.
    pub fn embedding_dim(&self) -> usize {
        if self.variant.has_capsules() {
            self.digit_capsules * self.digit_dim
        } else {
            BIN_COUNT * self.context_dim()
        }
    }

    fn projection_input(&self) -> usize {
        if self.variant == Variant::ConvPrimary {
            let (rows, cols) = fold_shape(self.context_dim()).expect("validated");
            self.conv_kernels * (rows - 2) * (cols - 2)
        } else {
            BIN_COUNT * self.context_dim()
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.pfe.param_specs();
        if self.variant.has_rnn() {
            specs.extend(recurrent::direction_specs("rnn.fwd", self.pfe.bin_dim, self.hidden));
            if self.variant != Variant::UniGru {
                specs.extend(recurrent::direction_specs("rnn.bwd", self.pfe.bin_dim, self.hidden));
            }
        }
        if self.variant.has_capsules() {
            if self.variant == Variant::ConvPrimary {
                let bins = BIN_COUNT;
                specs.push(ParamSpec::xavier(
                    "caps.conv.kernel",
                    &[self.conv_kernels, bins, 3, 3],
                    bins * 9,
                    self.conv_kernels * 9,
                ));
            }
            specs.extend(ParamSpec::dense(
                "caps.primary",
                self.projection_input(),
                self.capsules * self.capsule_dim,
            ));
            specs.push(ParamSpec::xavier(
                "caps.route.weight",
                &[self.capsules, self.digit_capsules, self.capsule_dim, self.digit_dim],
                self.capsule_dim,
                self.digit_dim,
            ));
        }
        specs.extend(ParamSpec::dense("cls", self.embedding_dim(), self.n_classes));
        specs.sort_by(|a, b| a.path.cmp(&b.path));
        specs
    }

    pub fn init(&self, seed: u64) -> Result<ModelParams> {
        self.validate()?;
        ModelParams::init(&self.param_specs(), seed)
    }
}

/// Vars recorded by [`forward_tape`].
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[31, d]` mapped bins.
    pub bins: Var,
    /// `[31, context_dim]` recurrent context (the bins themselves without RNN).
    pub context: Var,
    /// Flat embedding used for matching.
    pub embedding: Var,
    /// `[n_classes]` class probabilities.
    pub probs: Var,
}

/// Records the whole network on `tape` for frames `[T, 1, 64, 64]`.
/// `dropout_mask` multiplies the recurrent output when given.
pub fn forward_tape<'p>(
    tape: &mut Tape<'p>,
    binder: &mut ParamBinder<'p>,
    arch: &Architecture,
    frames: Tensor,
    dropout_mask: Option<Vec<f64>>,
) -> Result<ForwardVars> {
    let x = tape.constant(frames);
    let bins = pfe::pfe_tape(tape, binder, &arch.pfe, x)?;
    let context = if arch.variant.has_rnn() {
        recurrent::recurrent_tape(tape, binder, bins, arch.variant != Variant::UniGru, dropout_mask)?
    } else {
        bins
    };
    let embedding = if arch.variant.has_capsules() {
        let conv = arch.variant == Variant::ConvPrimary;
        let primary = capsule::primary_caps_tape(tape, binder, context, arch.capsules, conv)?;
        let digits = capsule::routing_tape(tape, binder, primary, arch.routing_iters)?;
        let n = tape.value(digits).len();
        tape.reshape(digits, &[n])?
    } else {
        let n = tape.value(context).len();
        tape.reshape(context, &[n])?
    };
    let w = binder.var(tape, "cls.weight")?;
    let b = binder.var(tape, "cls.bias")?;
    let logits = tape.linear(embedding, w, b)?;
    let probs = tape.softmax(logits);
    Ok(ForwardVars { bins, context, embedding, probs })
}

/// Inference outputs for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub embedding: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Dropout-free forward pass.
pub fn infer(params: &ModelParams, arch: &Architecture, frames: &Tensor) -> Result<Inference> {
    let mut tape = Tape::new();
    let mut binder = ParamBinder::frozen(params, &[""]);
    let out = forward_tape(&mut tape, &mut binder, arch, frames.clone(), None)?;
    let embedding = tape.value(out.embedding).clone();
    embedding.ensure_finite("embedding")?;
    Ok(Inference {
        embedding: embedding.into_data(),
        probs: tape.value(out.probs).data().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny(variant: Variant) -> Architecture {
        Architecture {
            pfe: PfeConfig::parse("c2k3,p4,c3k3,p4", 4).unwrap(),
            hidden: 8,
            capsules: 2,
            capsule_dim: 3,
            digit_capsules: 3,
            digit_dim: 2,
            routing_iters: 3,
            conv_kernels: 2,
            n_classes: 3,
            variant,
        }
    }

    fn frames(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, 1, 64, 64], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
    }

    #[test]
    fn every_variant_runs() {
        for v in Variant::ALL {
            let arch = tiny(v);
            let params = arch.init(1).unwrap();
            params.validate(&arch.param_specs()).unwrap();
            let out = infer(&params, &arch, &frames(2)).unwrap();
            assert_eq!(out.embedding.len(), arch.embedding_dim(), "{v}");
            assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn extractor_init_is_shared_across_variants() {
        let a = tiny(Variant::Full).init(5).unwrap();
        let b = tiny(Variant::NoRnn).init(5).unwrap();
        assert_eq!(a.get("pfe.conv1.kernel").unwrap(), b.get("pfe.conv1.kernel").unwrap());
    }

    #[test]
    fn desk_shapes() {
        let arch = Architecture::desk(10);
        arch.validate().unwrap();
        let specs = arch.param_specs();
        let find = |p: &str| specs.iter().find(|s| s.path == p).unwrap().shape.clone();
        assert_eq!(find("caps.primary.weight"), vec![31 * 256, 768]);
        assert_eq!(find("caps.route.weight"), vec![6, 8, 128, 16]);
        assert_eq!(find("cls.weight"), vec![128, 10]);
        let conv = arch.with_variant(Variant::ConvPrimary).param_specs();
        assert!(conv.iter().any(|s| s.path == "caps.conv.kernel" && s.shape == [32, 31, 3, 3]));
        assert!(tiny(Variant::Full).with_variant(Variant::UniGru).param_specs().iter().all(|s| !s.path.starts_with("rnn.bwd")));
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}
