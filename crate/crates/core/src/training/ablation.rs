use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{pretrain_pfe, train_full, Checkpoint, Pretrained, TrainConfig};
use crate::evaluation::{build_protocol, evaluate, EvalReport, ProtocolKind};
use crate::gait_data::DatasetIndex;
use crate::model::Variant;
use crate::{Error, Result};

/// Train/test identity split of `config.train_identities`; 0 means train and
/// test on the whole index.
fn split(index: &DatasetIndex, config: &TrainConfig) -> Result<(DatasetIndex, DatasetIndex)> {
    if config.train_identities == 0 {
        Ok((index.clone(), index.clone()))
    } else {
        index.split_identities(config.train_identities)
    }
}

/// A trained model with its report on the held-out identities.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluated {
    pub checkpoint: Checkpoint,
    pub pretrain_log: Vec<f64>,
    pub train_log: Vec<f64>,
    pub report: EvalReport,
}

fn run(
    train: &DatasetIndex,
    test: &DatasetIndex,
    config: &TrainConfig,
    protocol: ProtocolKind,
    pretrained: &Pretrained,
) -> Result<Evaluated> {
    let split = build_protocol(test, protocol)?;
    let out = train_full(train, config, Some(&pretrained.params), None)?;
    let report = evaluate(test, &split, &out.checkpoint)?;
    Ok(Evaluated {
        checkpoint: out.checkpoint,
        pretrain_log: pretrained.log.clone(),
        train_log: out.log,
        report,
    })
}

/// Both training phases on the training identities, then `protocol` on the rest.
pub fn train_and_evaluate(index: &DatasetIndex, config: &TrainConfig, protocol: ProtocolKind) -> Result<Evaluated> {
    let (train, test) = split(index, config)?;
    let pre = pretrain_pfe(&train, config)?;
    run(&train, &test, config, protocol, &pre)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Mean rank-1 per probe condition, in report column order.
    pub means: Vec<Option<f64>>,
    pub overall: Option<f64>,
    pub checkpoint: Option<PathBuf>,
}

/// One row per variant, one column per probe condition.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub protocol: ProtocolKind,
    pub config: TrainConfig,
    pub conditions: Vec<String>,
    pub rows: Vec<AblationRow>,
    /// Set when a variant failed; rows stop before it.
    pub failure: Option<(Variant, String)>,
}

impl AblationReport {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none() && self.rows.len() == Variant::ALL.len()
    }

    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// `#` header lines with the run flags, then a CSV table.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# protocol={} seed={} pretrain_steps={} train_steps={} freeze_pfe={} train_identities={}",
            self.protocol.name(),
            c.seed,
            c.pretrain_steps,
            c.train_steps,
            c.freeze_pfe,
            c.train_identities
        );
        let names: Vec<&str> = self.rows.iter().map(|r| r.variant.name()).collect();
        let _ = writeln!(s, "# variants={}", names.join(","));
        let _ = writeln!(s, "# complete={}", self.is_complete());
        if let Some((v, e)) = &self.failure {
            let _ = writeln!(s, "# failed={}: {e}", v.name());
        }
        let _ = writeln!(s, "variant,rnn,capsules,{},mean,checkpoint", self.conditions.join(","));
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        for r in &self.rows {
            let rnn = match r.variant {
                Variant::NoRnn => "none",
                Variant::UniGru => "forward",
                _ => "bidirectional",
            };
            let caps = match r.variant {
                Variant::NoCapsule => "none",
                Variant::ConvPrimary => "conv",
                _ => "linear",
            };
            let cells: Vec<String> = r.means.iter().map(|&m| fmt(m)).collect();
            let path = r.checkpoint.as_ref().map_or(String::new(), |p| p.display().to_string());
            let _ = writeln!(s, "{},{rnn},{caps},{},{},{path}", r.variant.name(), cells.join(","), fmt(r.overall));
        }
        s
    }
}

fn row(variant: Variant, report: &EvalReport, conditions: &[String], checkpoint: Option<PathBuf>) -> AblationRow {
    AblationRow {
        variant,
        means: conditions
            .iter()
            .map(|c| report.condition(c).and_then(|r| r.means.overall))
            .collect(),
        overall: report.overall_mean(),
        checkpoint,
    }
}

/// Trains and evaluates every [`Variant`] with the same data, seed and
/// phases. The extractor pretraining is variant-independent and runs once.
/// With `checkpoint_dir`, each variant's checkpoint is saved there as
/// `<variant>.gcap`.
pub fn ablate(
    index: &DatasetIndex,
    config: &TrainConfig,
    protocol: ProtocolKind,
    checkpoint_dir: Option<&Path>,
) -> Result<AblationReport> {
    let (train, test) = split(index, config)?;
    let conditions: Vec<String> = build_protocol(&test, protocol)?.probes.into_iter().map(|(n, _)| n).collect();
    let mut report = AblationReport {
        protocol,
        config: config.clone(),
        conditions,
        rows: Vec::new(),
        failure: None,
    };
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pre = match pretrain_pfe(&train, config) {
        Ok(p) => p,
        Err(e) => {
            report.failure = Some((Variant::ALL[0], e.to_string()));
            return Ok(report);
        }
    };
    for &variant in Variant::ALL.iter() {
        let mut cfg = config.clone();
        cfg.arch.variant = variant;
        let result = run(&train, &test, &cfg, protocol, &pre).and_then(|ev| {
            let path = match checkpoint_dir {
                Some(dir) => {
                    let p = dir.join(format!("{}.gcap", variant.name()));
                    ev.checkpoint.save(&p)?;
                    Some(p)
                }
                None => None,
            };
            Ok(row(variant, &ev.report, &report.conditions, path))
        });
        match result {
            Ok(r) => {
                log::info!("ablation {}: overall {:?}", variant.name(), r.overall);
                report.rows.push(r);
            }
            Err(e) => {
                report.failure = Some((variant, e.to_string()));
                break;
            }
        }
    }
    Ok(report)
}
