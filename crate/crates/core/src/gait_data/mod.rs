//! Silhouette datasets: on-disk layouts, preprocessing, a procedural
//! generator and p×k batch sampling.

mod preprocess;
mod sampler;
mod synth;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

pub use preprocess::{crop_window, preprocess_frame, CropWindow, SilhouetteFrame, SIDE};
pub use sampler::{sample_batch, Batch, Sample};
pub use synth::{parse_conditions, synth_dataset, IdentityTraits, SynthSummary, DEFAULT_CONDITIONS};

use crate::tensor_core::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    /// Normal walking.
    Nm,
    /// Carrying a bag.
    Bg,
    /// Wearing a coat.
    Cl,
    /// Recording session of a two-session layout.
    Session,
}

impl Condition {
    pub fn tag(self) -> &'static str {
        match self {
            Condition::Nm => "nm",
            Condition::Bg => "bg",
            Condition::Cl => "cl",
            Condition::Session => "session",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nm" => Ok(Condition::Nm),
            "bg" => Ok(Condition::Bg),
            "cl" => Ok(Condition::Cl),
            "session" => Ok(Condition::Session),
            _ => Err(Error::InvalidArgument(format!("unknown condition `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `root/<subject>/<cond>-<nn>/<view>/<frame>.png`
    CasiaB,
    /// `root/<subject>/<nn>/<view>/<frame>.png`
    OuMvlp,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "casia-b" => Ok(Layout::CasiaB),
            "ou-mvlp" | "ou-mvlp-like" => Ok(Layout::OuMvlp),
            _ => Err(Error::UnknownLayout(s.to_string())),
        }
    }
}

/// Identifies a sequence within a dataset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SequenceKey {
    pub identity: String,
    pub condition: Condition,
    pub seq: u32,
    pub view: u32,
}

impl fmt::Display for SequenceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.condition {
            Condition::Session => write!(f, "{}/{:02}/{:03}", self.identity, self.seq, self.view),
            c => write!(f, "{}/{}-{:02}/{:03}", self.identity, c, self.seq, self.view),
        }
    }
}

/// Preprocessed frames of one walk plus its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitSequence {
    pub key: SequenceKey,
    pub frames: Vec<SilhouetteFrame>,
    pub source: PathBuf,
}

impl GaitSequence {
    pub fn new(key: SequenceKey, frames: Vec<SilhouetteFrame>, source: PathBuf) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Degenerate(format!("sequence {key} has no frames")));
        };
        let dims = (first.width(), first.height());
        if frames.iter().any(|f| (f.width(), f.height()) != dims) {
            return Err(Error::shape("gait_sequence", format!("frames of {key} differ in size")));
        }
        Ok(GaitSequence { key, frames, source })
    }

    /// Frames at `indices` as a `[T, 1, H, W]` tensor of 0/1 values.
    pub fn tensor_of(&self, indices: &[usize]) -> Tensor {
        let (w, h) = (self.frames[0].width(), self.frames[0].height());
        let data = indices
            .iter()
            .flat_map(|&i| self.frames[i].pixels().iter().map(|&p| f64::from(p)))
            .collect();
        Tensor::new(vec![indices.len(), 1, h, w], data).expect("uniform frames")
    }

    /// Every frame, in order.
    pub fn tensor(&self) -> Tensor {
        self.tensor_of(&(0..self.frames.len()).collect::<Vec<_>>())
    }
}

/// Sorted, de-duplicated collection of sequences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetIndex {
    sequences: Vec<GaitSequence>,
    identities: Vec<String>,
    views: Vec<u32>,
    /// Problems met while loading: skipped frames and excluded sequences.
    pub warnings: Vec<String>,
}

impl DatasetIndex {
    pub fn from_sequences(mut sequences: Vec<GaitSequence>) -> Result<Self> {
        sequences.sort_by(|a, b| a.key.cmp(&b.key));
        if let Some(w) = sequences.windows(2).find(|w| w[0].key == w[1].key) {
            return Err(Error::InvalidArgument(format!("duplicate sequence {}", w[0].key)));
        }
        let mut identities: Vec<String> = sequences.iter().map(|s| s.key.identity.clone()).collect();
        identities.dedup();
        let mut views: Vec<u32> = sequences.iter().map(|s| s.key.view).collect();
        views.sort_unstable();
        views.dedup();
        Ok(DatasetIndex {
            sequences,
            identities,
            views,
            warnings: Vec::new(),
        })
    }

    pub fn sequences(&self) -> &[GaitSequence] {
        &self.sequences
    }

    pub fn identities(&self) -> &[String] {
        &self.identities
    }

    pub fn views(&self) -> &[u32] {
        &self.views
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Position of `identity` in the sorted roster.
    pub fn label_of(&self, identity: &str) -> Option<usize> {
        self.identities.binary_search_by(|i| i.as_str().cmp(identity)).ok()
    }

    pub fn find(&self, key: &SequenceKey) -> Option<&GaitSequence> {
        self.sequences
            .binary_search_by(|s| s.key.cmp(key))
            .ok()
            .map(|i| &self.sequences[i])
    }

    /// Sequences of the given identities only.
    pub fn with_identities(&self, identities: &[String]) -> Result<Self> {
        let mut out = Self::from_sequences(
            self.sequences
                .iter()
                .filter(|s| identities.contains(&s.key.identity))
                .cloned()
                .collect(),
        )?;
        out.warnings = self.warnings.clone();
        Ok(out)
    }

    /// Splits the roster: the first `n_train` identities and the rest.
    pub fn split_identities(&self, n_train: usize) -> Result<(Self, Self)> {
        if n_train == 0 || n_train >= self.identities.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot split {} identities with {n_train} for training",
                self.identities.len()
            )));
        }
        let (train, test) = self.identities.split_at(n_train);
        Ok((self.with_identities(train)?, self.with_identities(test)?))
    }
}

fn read_dir_sorted(path: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn subdirs(path: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_dir_sorted(path)?.into_iter().filter(|p| p.is_dir()).collect())
}

fn name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn parse_sequence_dir(layout: Layout, dir: &str) -> Option<(Condition, u32)> {
    match layout {
        Layout::CasiaB => {
            let (cond, seq) = dir.split_once('-')?;
            Some((cond.parse().ok()?, seq.parse().ok()?))
        }
        Layout::OuMvlp => Some((Condition::Session, dir.parse().ok()?)),
    }
}

enum Loaded {
    Sequence(GaitSequence, Vec<String>),
    Excluded(String),
}

fn load_sequence(key: SequenceKey, dir: &Path) -> Result<Loaded> {
    let files: Vec<PathBuf> = read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    let mut frames = Vec::with_capacity(files.len());
    let mut warnings = Vec::new();
    for file in &files {
        let raw = match SilhouetteFrame::read_png(file) {
            Ok(raw) => raw,
            Err(e) => return Ok(Loaded::Excluded(format!("excluded sequence {key}: {e}"))),
        };
        match preprocess_frame(&raw) {
            Ok(f) => frames.push(f),
            Err(e) => warnings.push(format!("skipped frame {}: {e}", file.display())),
        }
    }
    if frames.is_empty() {
        return Ok(Loaded::Excluded(format!("excluded sequence {key}: no valid frames")));
    }
    Ok(Loaded::Sequence(GaitSequence::new(key, frames, dir.to_path_buf())?, warnings))
}

/// Loads and preprocesses every sequence under `root`.
///
/// Undecodable images exclude their sequence; blank frames are skipped. Both
/// are recorded in [`DatasetIndex::warnings`] and logged. Directories that do
/// not fit the layout are skipped with a warning.
pub fn load_dataset(root: &Path, layout: Layout) -> Result<DatasetIndex> {
    let mut jobs = Vec::new();
    let mut warnings = Vec::new();
    for subject in subdirs(root)? {
        for seq_dir in subdirs(&subject)? {
            let Some((condition, seq)) = parse_sequence_dir(layout, &name(&seq_dir)) else {
                warnings.push(format!("ignored directory {}", seq_dir.display()));
                continue;
            };
            for view_dir in subdirs(&seq_dir)? {
                let Ok(view) = name(&view_dir).parse::<u32>() else {
                    warnings.push(format!("ignored directory {}", view_dir.display()));
                    continue;
                };
                let key = SequenceKey {
                    identity: name(&subject),
                    condition,
                    seq,
                    view,
                };
                jobs.push((key, view_dir));
            }
        }
    }
    let loaded: Vec<Result<Loaded>> = jobs.into_par_iter().map(|(key, dir)| load_sequence(key, &dir)).collect();
    let mut sequences = Vec::new();
    for item in loaded {
        match item? {
            Loaded::Sequence(s, w) => {
                sequences.push(s);
                warnings.extend(w);
            }
            Loaded::Excluded(w) => warnings.push(w),
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut index = DatasetIndex::from_sequences(sequences)?;
    index.warnings = warnings;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_frame(dir: &Path, i: usize, blank: bool) {
        fs::create_dir_all(dir).unwrap();
        let f = SilhouetteFrame::from_fn(20, 30, |r, c| !blank && (5..25).contains(&r) && (4..12).contains(&c));
        f.write_png(&dir.join(format!("{i:03}.png"))).unwrap();
    }

    #[test]
    fn loads_casia_layout() {
        let tmp = tempfile::tempdir().unwrap();
        for s in ["001", "002"] {
            for v in ["000", "090"] {
                for i in 0..3 {
                    write_frame(&tmp.path().join(s).join("nm-01").join(v), i, false);
                }
            }
        }
        let index = load_dataset(tmp.path(), Layout::CasiaB).unwrap();
        assert_eq!(index.len(), 4);
        assert_eq!(index.identities(), &["001", "002"]);
        assert_eq!(index.views(), &[0, 90]);
        assert!(index.sequences().iter().all(|s| s.frames.len() == 3 && s.key.condition == Condition::Nm));
        assert!(index.warnings.is_empty());
    }

    #[test]
    fn bad_frames_and_files() {
        let tmp = tempfile::tempdir().unwrap();
        let good = tmp.path().join("001/bg-02/018");
        write_frame(&good, 0, false);
        write_frame(&good, 1, true);
        let broken = tmp.path().join("001/cl-01/018");
        write_frame(&broken, 0, false);
        fs::write(broken.join("001.png"), b"not an image").unwrap();
        let index = load_dataset(tmp.path(), Layout::CasiaB).unwrap();
        assert_eq!(index.len(), 1);
        assert_eq!(index.sequences()[0].key.condition, Condition::Bg);
        assert_eq!(index.sequences()[0].frames.len(), 1);
        assert_eq!(index.warnings.len(), 2);
        assert!(index.warnings.iter().any(|w| w.contains("excluded sequence 001/cl-01/018")));
    }

    #[test]
    fn ou_layout_and_errors() {
        let tmp = tempfile::tempdir().unwrap();
        write_frame(&tmp.path().join("00007/01/030"), 0, false);
        let index = load_dataset(tmp.path(), Layout::OuMvlp).unwrap();
        assert_eq!(index.sequences()[0].key.condition, Condition::Session);
        assert_eq!(index.sequences()[0].key.seq, 1);
        assert!(matches!("bogus".parse::<Layout>(), Err(Error::UnknownLayout(_))));
        assert!(matches!(load_dataset(&tmp.path().join("missing"), Layout::OuMvlp), Err(Error::Io { .. })));
    }

    #[test]
    fn split_is_by_roster() {
        let mk = |id: &str, view| SequenceKey { identity: id.into(), condition: Condition::Nm, seq: 1, view };
        let frame = SilhouetteFrame::from_fn(4, 4, |_, _| true);
        let seqs = ["a", "b", "c"]
            .iter()
            .flat_map(|id| [0, 90].map(|v| GaitSequence::new(mk(id, v), vec![frame.clone()], PathBuf::new()).unwrap()))
            .collect();
        let index = DatasetIndex::from_sequences(seqs).unwrap();
        let (train, test) = index.split_identities(2).unwrap();
        assert_eq!(train.identities(), &["a", "b"]);
        assert_eq!(test.len(), 2);
        assert_eq!(index.label_of("c"), Some(2));
        assert!(index.split_identities(3).is_err());
    }
}
