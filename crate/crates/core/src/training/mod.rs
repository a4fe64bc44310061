//! Two-phase training: triplet pretraining of the extractor, then
//! cross-entropy training of the whole network through the classifier.
//!
//! Each sample of a batch is differentiated on its own tape; per-sample
//! gradients are summed in sample order, so results do not depend on the
//! number of worker threads.

mod ablation;
mod checkpoint;
mod config;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use ablation::{ablate, train_and_evaluate, AblationReport, AblationRow, Evaluated};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::{Scale, TrainConfig};

use crate::capsule::DigitCapsules;
use crate::gait_data::{sample_batch, Batch, DatasetIndex, GaitSequence};
use crate::model::{self, forward_tape, ParamBinder};
use crate::pfe::{self, triplet_loss_ba};
use crate::recurrent::dropout_mask;
use crate::tensor_core::{adam_step, cross_entropy, cross_entropy_backward, AdamConfig, AdamState, Tape, Tensor};
use crate::{Error, ModelParams, Result};

/// Samples differentiated concurrently; bounds peak gradient memory.
const CHUNK: usize = 4;

const PRETRAIN_STREAM: u64 = 0x7072_6574_7261_696e;
const TRAIN_STREAM: u64 = 0x7472_6169_6e5f_6365;

type GradMap = BTreeMap<String, Tensor>;

/// Called with the step count and current parameters every `eval_every` steps.
pub type EvalHook<'h> = &'h mut dyn FnMut(usize, &ModelParams) -> Result<()>;

/// Flattens `[J, D2]` digit capsules, applies `weight: [J·D2, n]` and `bias`,
/// and returns softmax probabilities over the `n` classes.
pub fn classify(digits: &DigitCapsules, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = bias.len();
    if n < 2 {
        return Err(Error::InvalidArgument("classifier needs at least 2 classes".into()));
    }
    let flat = digits.capsules.clone().reshape(&[1, digits.capsules.len()])?;
    let logits = crate::tensor_core::linear(&flat, weight, bias)?.reshape(&[n])?;
    Ok(crate::tensor_core::softmax(&logits))
}

fn accumulate(total: &mut GradMap, part: GradMap) -> Result<()> {
    for (path, g) in part {
        match total.get_mut(&path) {
            Some(t) => t.add_assign(&g)?,
            None => {
                total.insert(path, g);
            }
        }
    }
    Ok(())
}

struct Optimizer {
    cfg: AdamConfig,
    states: BTreeMap<String, AdamState>,
    touched: BTreeSet<String>,
}

impl Optimizer {
    fn new(lr: f64) -> Self {
        Optimizer {
            cfg: AdamConfig { lr, ..AdamConfig::default() },
            states: BTreeMap::new(),
            touched: BTreeSet::new(),
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &GradMap) -> Result<()> {
        for (path, g) in grads {
            g.ensure_finite(path)?;
            if g.data().iter().any(|&v| v != 0.0) {
                self.touched.insert(path.clone());
            }
            let p = params.get_mut(path)?;
            let state = self.states.entry(path.clone()).or_insert_with(|| AdamState::new(g.shape()));
            adam_step(p, g, state, &self.cfg)?;
        }
        Ok(())
    }
}

fn check_loss(loss: f64, phase: &str, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{phase} loss at step {step} ({loss})")))
    }
}

/// Extractor parameters after triplet pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    /// The `pfe.*` entries only.
    pub params: ModelParams,
    /// Triplet loss of every step.
    pub log: Vec<f64>,
}

fn pfe_only(params: &ModelParams) -> Result<ModelParams> {
    let mut out = ModelParams::new();
    for (path, t) in params.iter().filter(|(p, _)| p.starts_with("pfe.")) {
        out.insert(path, t.clone())?;
    }
    Ok(out)
}

fn triplet_step(index: &DatasetIndex, cfg: &TrainConfig, params: &ModelParams, batch: &Batch) -> Result<(f64, GradMap)> {
    let arch = &cfg.arch;
    let forwards = (0..batch.samples.len())
        .into_par_iter()
        .map(|i| {
            let mut tape = Tape::new();
            let mut binder = ParamBinder::new(params);
            let x = tape.constant(batch.frames(index, i));
            let bins = pfe::pfe_tape(&mut tape, &mut binder, &arch.pfe, x)?;
            Ok((tape, binder, bins))
        })
        .collect::<Result<Vec<_>>>()?;
    let (bins, d) = (pfe::BIN_COUNT, arch.pfe.bin_dim);
    let features: Vec<f64> = forwards.iter().flat_map(|(t, _, v)| t.value(*v).data().to_vec()).collect();
    let features = Tensor::new(vec![forwards.len(), bins, d], features)?;
    let loss = triplet_loss_ba(&features, &batch.labels(), cfg.margin)?;
    let per_sample = forwards
        .into_par_iter()
        .enumerate()
        .map(|(i, (tape, binder, v))| {
            let seed = Tensor::new(vec![bins, d], loss.grad.data()[i * bins * d..(i + 1) * bins * d].to_vec())?;
            let mut grads = tape.backward(v, seed)?;
            Ok(binder.collect(&mut grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = GradMap::new();
    for g in per_sample {
        accumulate(&mut total, g)?;
    }
    Ok((loss.loss, total))
}

/// Adam on the batch-all triplet loss over the extractor only.
pub fn pretrain_pfe(index: &DatasetIndex, config: &TrainConfig) -> Result<Pretrained> {
    config.validate()?;
    let mut params = pfe_only(&config.arch.init(config.seed)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ PRETRAIN_STREAM);
    let mut opt = Optimizer::new(config.lr);
    let mut log = Vec::with_capacity(config.pretrain_steps);
    for step in 0..config.pretrain_steps {
        let batch = sample_batch(index, config.p, config.k, config.frames_per_sample, &mut rng)?;
        let (loss, grads) = triplet_step(index, config, &params, &batch)?;
        check_loss(loss, "triplet", step)?;
        opt.step(&mut params, &grads)?;
        log.push(loss);
        log::debug!("pretrain step {step}: loss {loss:.6}");
    }
    Ok(Pretrained { params, log })
}

struct SampleResult {
    probs: Vec<f64>,
    grads: GradMap,
}

fn ce_sample(
    params: &ModelParams,
    cfg: &TrainConfig,
    frames: Tensor,
    label: usize,
    mask: Option<Vec<f64>>,
    batch: usize,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let frozen: &[&str] = if cfg.freeze_pfe { &["pfe."] } else { &[] };
    let mut binder = ParamBinder::frozen(params, frozen);
    let out = forward_tape(&mut tape, &mut binder, &cfg.arch, frames, mask)?;
    let probs = tape.value(out.probs).clone();
    let k = probs.len();
    let row = probs.clone().reshape(&[1, k])?;
    let mut seed = cross_entropy_backward(&row, &[label])?.reshape(&[k])?;
    seed.scale(1.0 / batch as f64);
    let mut grads = tape.backward(out.probs, seed)?;
    Ok(SampleResult {
        probs: probs.into_data(),
        grads: binder.collect(&mut grads),
    })
}

fn ce_step(
    index: &DatasetIndex,
    cfg: &TrainConfig,
    params: &ModelParams,
    batch: &Batch,
    masks: Vec<Option<Vec<f64>>>,
) -> Result<(f64, GradMap)> {
    let n = batch.samples.len();
    let labels = batch.labels();
    let mut probs = Vec::with_capacity(n * cfg.arch.n_classes);
    let mut total = GradMap::new();
    let jobs: Vec<(usize, Option<Vec<f64>>)> = masks.into_iter().enumerate().collect();
    for chunk in jobs.chunks(CHUNK) {
        let results = chunk
            .par_iter()
            .map(|(i, mask)| ce_sample(params, cfg, batch.frames(index, *i), labels[*i], mask.clone(), n))
            .collect::<Result<Vec<_>>>()?;
        for r in results {
            probs.extend(r.probs);
            accumulate(&mut total, r.grads)?;
        }
    }
    let probs = Tensor::new(vec![n, cfg.arch.n_classes], probs)?;
    Ok((cross_entropy(&probs, &labels)?, total))
}

/// Result of [`train_full`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Cross-entropy of every step.
    pub log: Vec<f64>,
    /// Trainable parameters that never received a nonzero gradient.
    pub dead_parameters: Vec<String>,
}

/// End-to-end Adam on cross-entropy with one class per identity of `index`.
///
/// The extractor starts from `pretrained` when given and is updated unless
/// `freeze_pfe` is set. `hook` runs every `eval_every` steps.
pub fn train_full(
    index: &DatasetIndex,
    config: &TrainConfig,
    pretrained: Option<&ModelParams>,
    mut hook: Option<EvalHook<'_>>,
) -> Result<TrainOutcome> {
    let mut cfg = config.clone();
    cfg.arch.n_classes = index.identities().len();
    cfg.validate()?;
    let mut params = cfg.arch.init(cfg.seed)?;
    if let Some(p) = pretrained {
        params.copy_prefix_from(p, "pfe.")?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_STREAM);
    let mut opt = Optimizer::new(cfg.lr);
    let mut log = Vec::with_capacity(cfg.train_steps);
    let mask_len = pfe::BIN_COUNT * cfg.arch.context_dim();
    let use_dropout = cfg.arch.variant.has_rnn() && cfg.dropout > 0.0;
    for step in 0..cfg.train_steps {
        let batch = sample_batch(index, cfg.p, cfg.k, cfg.frames_per_sample, &mut rng)?;
        let masks = (0..batch.samples.len())
            .map(|_| use_dropout.then(|| dropout_mask(mask_len, cfg.dropout, &mut rng)))
            .collect();
        let (loss, grads) = ce_step(index, &cfg, &params, &batch, masks)?;
        check_loss(loss, "cross-entropy", step)?;
        opt.step(&mut params, &grads)?;
        log.push(loss);
        log::debug!("train step {step}: loss {loss:.6}");
        if let Some(h) = hook.as_mut() {
            if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
                h(step + 1, &params)?;
            }
        }
    }
    let dead_parameters = params
        .iter()
        .map(|(p, _)| p.to_string())
        .filter(|p| !opt.touched.contains(p) && !(cfg.freeze_pfe && p.starts_with("pfe.")))
        .collect();
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(cfg, params)?,
        log,
        dead_parameters,
    })
}

/// Both phases back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct Training {
    pub checkpoint: Checkpoint,
    pub pretrain_log: Vec<f64>,
    pub train_log: Vec<f64>,
}

pub fn train(index: &DatasetIndex, config: &TrainConfig, hook: Option<EvalHook<'_>>) -> Result<Training> {
    let pre = pretrain_pfe(index, config)?;
    let out = train_full(index, config, Some(&pre.params), hook)?;
    Ok(Training {
        checkpoint: out.checkpoint,
        pretrain_log: pre.log,
        train_log: out.log,
    })
}

/// Most probable class of a sequence, using all of its frames.
pub fn predict(checkpoint: &Checkpoint, seq: &GaitSequence) -> Result<usize> {
    let out = model::infer(checkpoint.params(), &checkpoint.config.arch, &seq.tensor())?;
    Ok(out
        .probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
        .0)
}

/// Fraction of sequences in `index` classified as their own identity; labels
/// are positions in `index`'s roster.
pub fn accuracy(checkpoint: &Checkpoint, index: &DatasetIndex) -> Result<f64> {
    let hits = index
        .sequences()
        .par_iter()
        .map(|s| Ok(predict(checkpoint, s)? == index.label_of(&s.key.identity).expect("own roster")))
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Variant};
    use crate::pfe::PfeConfig;

    #[test]
    fn zero_head_is_uniform() {
        let digits = DigitCapsules { capsules: Tensor::full(&[2, 3], 0.1) };
        let p = classify(&digits, &Tensor::zeros(&[6, 4]), &Tensor::zeros(&[4])).unwrap();
        assert_eq!(p.data(), &[0.25; 4]);
        assert!(classify(&digits, &Tensor::zeros(&[6, 1]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn classify_matches_tape_head() {
        let arch = Architecture {
            pfe: PfeConfig::parse("c2k3,p8", 2).unwrap(),
            hidden: 2,
            capsules: 2,
            capsule_dim: 2,
            digit_capsules: 3,
            digit_dim: 2,
            routing_iters: 2,
            conv_kernels: 1,
            n_classes: 4,
            variant: Variant::Full,
        };
        let params = arch.init(3).unwrap();
        let frames = Tensor::from_fn(&[2, 1, 64, 64], |i| ((i / 64) % 7 < 3) as u8 as f64);
        let out = model::infer(&params, &arch, &frames).unwrap();
        let digits = DigitCapsules { capsules: Tensor::new(vec![3, 2], out.embedding).unwrap() };
        let p = classify(&digits, params.get("cls.weight").unwrap(), params.get("cls.bias").unwrap()).unwrap();
        assert_eq!(p.data(), out.probs.as_slice());
    }
}
