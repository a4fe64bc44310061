//! Gallery/probe protocols, rank-1 cross-view matrices and embedding export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::gait_data::{Condition, DatasetIndex, GaitSequence, SequenceKey};
use crate::training::Checkpoint;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolKind {
    /// Gallery NM 1–4; probes NM 5–6, BG 1–2, CL 1–2.
    CasiaB,
    /// Probe session 00 against gallery session 01.
    OuMvlp,
    /// Gallery is the first half of each identity's NM sequences per view;
    /// the other NM sequences and every BG/CL sequence are probes.
    Synthetic,
}

impl ProtocolKind {
    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::CasiaB => "casia-b",
            ProtocolKind::OuMvlp => "ou-mvlp",
            ProtocolKind::Synthetic => "synthetic",
        }
    }
}

impl FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "casia-b" => Ok(ProtocolKind::CasiaB),
            "ou-mvlp" => Ok(ProtocolKind::OuMvlp),
            "synthetic" => Ok(ProtocolKind::Synthetic),
            _ => Err(Error::InvalidArgument(format!(
                "unknown protocol `{s}` (expected casia-b, ou-mvlp or synthetic)"
            ))),
        }
    }
}

/// A sequence chosen by a protocol, by position in the index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolEntry {
    pub sequence: usize,
    pub identity: String,
    pub view: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolSplit {
    pub kind: ProtocolKind,
    pub gallery: Vec<ProtocolEntry>,
    /// Probe sets in report order, keyed by condition name.
    pub probes: Vec<(String, Vec<ProtocolEntry>)>,
}

impl ProtocolSplit {
    /// Every gallery and probe entry, gallery first.
    pub fn entries(&self) -> impl Iterator<Item = &ProtocolEntry> {
        self.gallery.iter().chain(self.probes.iter().flat_map(|(_, p)| p))
    }
}

fn position(index: &DatasetIndex, key: &SequenceKey) -> Option<usize> {
    index.sequences().binary_search_by(|s| s.key.cmp(key)).ok()
}

fn entry(index: &DatasetIndex, i: usize) -> ProtocolEntry {
    let k = &index.sequences()[i].key;
    ProtocolEntry { sequence: i, identity: k.identity.clone(), view: k.view }
}

/// Splits `index` into gallery and probe sets. Every identity must have the
/// named sequences at every view of the index.
pub fn build_protocol(index: &DatasetIndex, kind: ProtocolKind) -> Result<ProtocolSplit> {
    let mut missing = Vec::new();
    let mut gallery = Vec::new();
    let mut probes: Vec<(String, Vec<ProtocolEntry>)> = Vec::new();
    let mut probe = |name: &str, e: ProtocolEntry| match probes.iter_mut().find(|(n, _)| n == name) {
        Some((_, v)) => v.push(e),
        None => probes.push((name.to_string(), vec![e])),
    };
    for id in index.identities() {
        for &view in index.views() {
            let key = |condition, seq| SequenceKey { identity: id.clone(), condition, seq, view };
            match kind {
                ProtocolKind::CasiaB | ProtocolKind::OuMvlp => {
                    let roles: &[(Condition, u32, Option<&str>)] = if kind == ProtocolKind::CasiaB {
                        &[
                            (Condition::Nm, 1, None),
                            (Condition::Nm, 2, None),
                            (Condition::Nm, 3, None),
                            (Condition::Nm, 4, None),
                            (Condition::Nm, 5, Some("nm")),
                            (Condition::Nm, 6, Some("nm")),
                            (Condition::Bg, 1, Some("bg")),
                            (Condition::Bg, 2, Some("bg")),
                            (Condition::Cl, 1, Some("cl")),
                            (Condition::Cl, 2, Some("cl")),
                        ]
                    } else {
                        &[(Condition::Session, 1, None), (Condition::Session, 0, Some("session"))]
                    };
                    for &(cond, seq, role) in roles {
                        let k = key(cond, seq);
                        match position(index, &k) {
                            None => missing.push(k.to_string()),
                            Some(i) => match role {
                                None => gallery.push(entry(index, i)),
                                Some(name) => probe(name, entry(index, i)),
                            },
                        }
                    }
                }
                ProtocolKind::Synthetic => {
                    let here: Vec<usize> = (0..index.len())
                        .filter(|&i| {
                            let k = &index.sequences()[i].key;
                            k.identity == *id && k.view == view
                        })
                        .collect();
                    let nm: Vec<usize> =
                        here.iter().copied().filter(|&i| index.sequences()[i].key.condition == Condition::Nm).collect();
                    if nm.len() < 2 {
                        let next = nm.last().map_or(1, |&i| index.sequences()[i].key.seq + 1);
                        for seq in next..next + 2 - nm.len() as u32 {
                            missing.push(key(Condition::Nm, seq).to_string());
                        }
                        continue;
                    }
                    let half = nm.len() / 2;
                    gallery.extend(nm[..half].iter().map(|&i| entry(index, i)));
                    for &i in &nm[half..] {
                        probe("nm", entry(index, i));
                    }
                    for &i in &here {
                        let c = index.sequences()[i].key.condition;
                        if c != Condition::Nm {
                            probe(c.tag(), entry(index, i));
                        }
                    }
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingSequences { protocol: kind.name().into(), missing });
    }
    let order = |name: &str| ["nm", "bg", "cl", "session"].iter().position(|n| *n == name);
    probes.sort_by_key(|(n, _)| order(n));
    Ok(ProtocolSplit { kind, gallery, probes })
}

/// Flattened digit capsules of a whole sequence, dropout off.
pub fn embed(seq: &GaitSequence, checkpoint: &Checkpoint) -> Result<Vec<f64>> {
    checkpoint.check_architecture(&checkpoint.config.arch)?;
    Ok(crate::model::infer(checkpoint.params(), &checkpoint.config.arch, &seq.tensor())?.embedding)
}

/// An embedding with the labels used for matching.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub identity: String,
    pub view: u32,
    pub embedding: Vec<f64>,
}

/// Embeds every sequence a protocol names, keyed by index position.
pub fn embed_split(index: &DatasetIndex, split: &ProtocolSplit, checkpoint: &Checkpoint) -> Result<BTreeMap<usize, Vec<f64>>> {
    checkpoint.check_architecture(&checkpoint.config.arch)?;
    let mut wanted: Vec<usize> = split.entries().map(|e| e.sequence).collect();
    wanted.sort_unstable();
    wanted.dedup();
    let out = wanted
        .par_iter()
        .map(|&i| Ok((i, embed(&index.sequences()[i], checkpoint)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(out.into_iter().collect())
}

/// Rank-1 percentages indexed `[probe view][gallery view]`; `None` marks an
/// identical-view cell or a probe view without probes.
#[derive(Debug, Clone, PartialEq)]
pub struct RankMatrix {
    pub views: Vec<u32>,
    pub cells: Vec<Vec<Option<f64>>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest-neighbour identification per (probe view, gallery view) pair.
/// Ties go to the earliest gallery entry.
pub fn rank1_matrix(gallery: &[Embedded], probes: &[Embedded], views: &[u32]) -> Result<RankMatrix> {
    let mut cells = vec![vec![None; views.len()]; views.len()];
    for (gi, &gv) in views.iter().enumerate() {
        let candidates: Vec<&Embedded> = gallery.iter().filter(|g| g.view == gv).collect();
        for (pi, &pv) in views.iter().enumerate() {
            let here: Vec<&Embedded> = probes.iter().filter(|p| p.view == pv).collect();
            if pv == gv || here.is_empty() {
                continue;
            }
            if candidates.is_empty() {
                return Err(Error::Degenerate(format!("no gallery entries at view {gv}")));
            }
            let mut correct = 0usize;
            for p in &here {
                let mut best = (f64::INFINITY, 0);
                for (c, g) in candidates.iter().enumerate() {
                    let d = sq_dist(&p.embedding, &g.embedding);
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                if candidates[best.1].identity == p.identity {
                    correct += 1;
                }
            }
            cells[pi][gi] = Some(100.0 * correct as f64 / here.len() as f64);
        }
    }
    Ok(RankMatrix { views: views.to_vec(), cells })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Means {
    /// Per probe view, over its included cells.
    pub per_view: Vec<Option<f64>>,
    /// Over every included cell.
    pub overall: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn aggregate(m: &RankMatrix) -> Means {
    Means {
        per_view: m.cells.iter().map(|row| mean(row.iter().flatten().copied())).collect(),
        overall: mean(m.cells.iter().flatten().flatten().copied()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub condition: String,
    pub matrix: RankMatrix,
    pub means: Means,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: ProtocolKind,
    pub conditions: Vec<ConditionReport>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

impl EvalReport {
    /// Mean over the included cells of every condition.
    pub fn overall_mean(&self) -> Option<f64> {
        mean(self.conditions.iter().flat_map(|c| c.matrix.cells.iter().flatten().flatten().copied()))
    }

    pub fn condition(&self, name: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.condition == name)
    }

    /// One block per condition: a header row of gallery views and a trailing
    /// mean column; excluded cells print as `-`.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for c in &self.conditions {
            let _ = writeln!(s, "condition,{}", c.condition);
            let views: Vec<String> = c.matrix.views.iter().map(u32::to_string).collect();
            let _ = writeln!(s, "probe\\gallery,{},mean", views.join(","));
            for (row, v) in c.matrix.cells.iter().zip(&c.matrix.views) {
                let cells: Vec<String> = row.iter().map(|&x| cell(x)).collect();
                let m = mean(row.iter().flatten().copied());
                let _ = writeln!(s, "{v},{},{}", cells.join(","), cell(m));
            }
            let _ = writeln!(s, "mean,{}", cell(c.means.overall));
            s.push('\n');
        }
        s
    }

    /// `key=value` lines: per-condition and per-view means, then the overall mean.
    pub fn summary(&self) -> String {
        let mut s = format!("protocol={}\n", self.protocol.name());
        for c in &self.conditions {
            for (v, m) in c.matrix.views.iter().zip(&c.means.per_view) {
                let _ = writeln!(s, "{}.view.{v}={}", c.condition, cell(*m));
            }
            let _ = writeln!(s, "{}.mean={}", c.condition, cell(c.means.overall));
        }
        let _ = writeln!(s, "overall={}", cell(self.overall_mean()));
        s
    }
}

/// Embeds the split with `checkpoint` and builds one matrix per probe set.
pub fn evaluate(index: &DatasetIndex, split: &ProtocolSplit, checkpoint: &Checkpoint) -> Result<EvalReport> {
    let emb = embed_split(index, split, checkpoint)?;
    let tag = |entries: &[ProtocolEntry]| -> Vec<Embedded> {
        entries
            .iter()
            .map(|e| Embedded { identity: e.identity.clone(), view: e.view, embedding: emb[&e.sequence].clone() })
            .collect()
    };
    let gallery = tag(&split.gallery);
    let conditions = split
        .probes
        .iter()
        .map(|(name, entries)| {
            let matrix = rank1_matrix(&gallery, &tag(entries), index.views())?;
            let means = aggregate(&matrix);
            Ok(ConditionReport { condition: name.clone(), matrix, means })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { protocol: split.kind, conditions })
}

/// Writes `id,view,condition,e0..e{n-1}` rows for every sequence of the split,
/// in split order; returns the number of data rows.
pub fn export_embeddings(index: &DatasetIndex, split: &ProtocolSplit, checkpoint: &Checkpoint, path: &Path) -> Result<usize> {
    let emb = embed_split(index, split, checkpoint)?;
    let n = checkpoint.config.arch.embedding_dim();
    let mut out = String::from("id,view,condition");
    for i in 0..n {
        let _ = write!(out, ",e{i}");
    }
    out.push('\n');
    let mut rows = 0;
    for e in split.entries() {
        let k = &index.sequences()[e.sequence].key;
        let _ = write!(out, "{},{},{}-{:02}", k.identity, k.view, k.condition.tag(), k.seq);
        for v in &emb[&e.sequence] {
            let _ = write!(out, ",{v:.8e}");
        }
        out.push('\n');
        rows += 1;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gait_data::SilhouetteFrame;
    use std::path::PathBuf;

    fn fixture(ids: usize, views: &[u32], conds: &[(Condition, u32)]) -> DatasetIndex {
        let frame = SilhouetteFrame::from_fn(4, 4, |r, _| r == 0);
        let mut seqs = Vec::new();
        for id in 0..ids {
            for &view in views {
                for &(condition, n) in conds {
                    for seq in 1..=n {
                        let key = SequenceKey { identity: format!("{id:03}"), condition, seq, view };
                        seqs.push(GaitSequence::new(key, vec![frame.clone()], PathBuf::new()).unwrap());
                    }
                }
            }
        }
        DatasetIndex::from_sequences(seqs).unwrap()
    }

    fn casia_views() -> Vec<u32> {
        (0..11).map(|i| i * 18).collect()
    }

    #[test]
    fn casia_counts() {
        let idx = fixture(3, &casia_views(), &[(Condition::Nm, 6), (Condition::Bg, 2), (Condition::Cl, 2)]);
        let s = build_protocol(&idx, ProtocolKind::CasiaB).unwrap();
        assert_eq!(s.gallery.len(), 132);
        let names: Vec<&str> = s.probes.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["nm", "bg", "cl"]);
        assert!(s.probes.iter().all(|(_, p)| p.len() == 66));
    }

    #[test]
    fn missing_key_is_named() {
        let idx = fixture(1, &[0], &[(Condition::Nm, 3), (Condition::Bg, 2), (Condition::Cl, 2)]);
        let e = build_protocol(&idx, ProtocolKind::CasiaB).unwrap_err().to_string();
        assert!(e.contains("000/nm-04/000"), "{e}");
        let idx = fixture(1, &[0], &[(Condition::Nm, 1)]);
        let e = build_protocol(&idx, ProtocolKind::Synthetic).unwrap_err().to_string();
        assert!(e.contains("000/nm-02/000"), "{e}");
    }

    #[test]
    fn ou_counts() {
        let frame = SilhouetteFrame::from_fn(2, 2, |_, _| true);
        let seqs = (0..2)
            .flat_map(|id| [0u32, 90].into_iter().flat_map(move |view| (0..2).map(move |seq| (id, view, seq))))
            .map(|(id, view, seq)| {
                let key = SequenceKey { identity: format!("{id:05}"), condition: Condition::Session, seq, view };
                GaitSequence::new(key, vec![frame.clone()], PathBuf::new()).unwrap()
            })
            .collect();
        let s = build_protocol(&DatasetIndex::from_sequences(seqs).unwrap(), ProtocolKind::OuMvlp).unwrap();
        assert_eq!(s.gallery.len(), 4);
        assert_eq!(s.probes.len(), 1);
        assert_eq!(s.probes[0].1.len(), 4);
    }

    #[test]
    fn synthetic_halves() {
        let idx = fixture(2, &[0, 90], &[(Condition::Nm, 5), (Condition::Bg, 1)]);
        let s = build_protocol(&idx, ProtocolKind::Synthetic).unwrap();
        assert_eq!(s.gallery.len(), 2 * 2 * 2);
        assert_eq!(s.probes[0], ("nm".into(), s.probes[0].1.clone()));
        assert_eq!(s.probes[0].1.len(), 2 * 2 * 3);
        assert_eq!(s.probes[1].1.len(), 4);
        let seqs: Vec<u32> = s.gallery.iter().map(|e| idx.sequences()[e.sequence].key.seq).collect();
        assert!(seqs.iter().all(|&q| q <= 2));
    }

    fn emb(id: &str, view: u32, e: &[f64]) -> Embedded {
        Embedded { identity: id.into(), view, embedding: e.to_vec() }
    }

    #[test]
    fn identical_probes_score_100() {
        let g = vec![emb("a", 0, &[0.0, 1.0]), emb("b", 0, &[5.0, 1.0]), emb("a", 1, &[0.0, 2.0]), emb("b", 1, &[5.0, 2.0])];
        let m = rank1_matrix(&g, &g, &[0, 1]).unwrap();
        assert_eq!(m.cells, vec![vec![None, Some(100.0)], vec![Some(100.0), None]]);
        let means = aggregate(&m);
        assert_eq!(means.per_view, vec![Some(100.0), Some(100.0)]);
        assert_eq!(means.overall, Some(100.0));
    }

    #[test]
    fn adversarial_scores_zero() {
        let g = vec![emb("a", 0, &[0.0]), emb("b", 0, &[10.0])];
        let p = vec![emb("a", 1, &[9.0]), emb("b", 1, &[1.0])];
        let m = rank1_matrix(&g, &p, &[0, 1]).unwrap();
        assert_eq!(m.cells[1][0], Some(0.0));
        assert_eq!(m.cells[0][1], None);
        assert_eq!(aggregate(&m).overall, Some(0.0));
    }

    #[test]
    fn ties_go_to_first_entry() {
        let g = vec![emb("b", 0, &[1.0]), emb("a", 0, &[-1.0])];
        let m = rank1_matrix(&g, &[emb("a", 1, &[0.0])], &[0, 1]).unwrap();
        assert_eq!(m.cells[1][0], Some(0.0));
    }

    #[test]
    fn csv_marks_excluded_cells() {
        let g = vec![emb("a", 0, &[0.0]), emb("a", 90, &[0.0])];
        let matrix = rank1_matrix(&g, &g, &[0, 90]).unwrap();
        let means = aggregate(&matrix);
        let r = EvalReport {
            protocol: ProtocolKind::Synthetic,
            conditions: vec![ConditionReport { condition: "nm".into(), matrix, means }],
        };
        let csv = r.to_csv();
        assert!(csv.contains("probe\\gallery,0,90,mean\n0,-,100.0000,100.0000\n"), "{csv}");
        assert!(r.summary().ends_with("overall=100.0000\n"));
    }

    #[test]
    fn protocol_names_roundtrip() {
        for k in [ProtocolKind::CasiaB, ProtocolKind::OuMvlp, ProtocolKind::Synthetic] {
            assert_eq!(k.name().parse::<ProtocolKind>().unwrap(), k);
        }
        assert!("bogus".parse::<ProtocolKind>().is_err());
    }
}
