use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::DatasetIndex;
use crate::tensor_core::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Position of the sequence in the index.
    pub sequence: usize,
    /// Identity label (position in the roster).
    pub label: usize,
    pub frame_indices: Vec<usize>,
}

/// `p` identities × `k` sequences each, identity-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub samples: Vec<Sample>,
}

impl Batch {
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// `[frames, 1, H, W]` input of sample `i`.
    pub fn frames(&self, index: &DatasetIndex, i: usize) -> Tensor {
        let s = &self.samples[i];
        index.sequences()[s.sequence].tensor_of(&s.frame_indices)
    }
}

/// Draws `p` distinct identities, `k` distinct sequences of each, and
/// `frames_per_sample` frames of every sequence: without replacement when the
/// sequence is long enough, with replacement otherwise.
pub fn sample_batch<R: Rng + ?Sized>(
    index: &DatasetIndex,
    p: usize,
    k: usize,
    frames_per_sample: usize,
    rng: &mut R,
) -> Result<Batch> {
    if p == 0 || k == 0 || frames_per_sample == 0 {
        return Err(Error::InvalidArgument("p, k and frames_per_sample must be positive".into()));
    }
    let per_identity: Vec<Vec<usize>> = index
        .identities()
        .iter()
        .map(|id| {
            (0..index.len())
                .filter(|&i| &index.sequences()[i].key.identity == id)
                .collect()
        })
        .collect();
    let eligible: Vec<usize> = (0..per_identity.len()).filter(|&i| per_identity[i].len() >= k).collect();
    if eligible.len() < p {
        return Err(Error::Degenerate(format!(
            "need {p} identities with at least {k} sequences, found {}",
            eligible.len()
        )));
    }
    let mut samples = Vec::with_capacity(p * k);
    for &label in eligible.choose_multiple(rng, p) {
        for &sequence in per_identity[label].choose_multiple(rng, k) {
            let len = index.sequences()[sequence].frames.len();
            let frame_indices = if len >= frames_per_sample {
                index::sample(rng, len, frames_per_sample).into_vec()
            } else {
                (0..frames_per_sample).map(|_| rng.gen_range(0..len)).collect()
            };
            samples.push(Sample { sequence, label, frame_indices });
        }
    }
    Ok(Batch { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gait_data::{Condition, GaitSequence, SequenceKey, SilhouetteFrame};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn index(frames: usize) -> DatasetIndex {
        let frame = SilhouetteFrame::from_fn(4, 4, |r, _| r == 0);
        let seqs = (0..3)
            .flat_map(|id| (1..=2).map(move |seq| (id, seq)))
            .map(|(id, seq)| {
                let key = SequenceKey { identity: format!("{id}"), condition: Condition::Nm, seq, view: 0 };
                GaitSequence::new(key, vec![frame.clone(); frames], PathBuf::new()).unwrap()
            })
            .collect();
        DatasetIndex::from_sequences(seqs).unwrap()
    }

    #[test]
    fn composition() {
        let idx = index(10);
        let b = sample_batch(&idx, 2, 2, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut labels = b.labels();
        assert_eq!(labels.len(), 4);
        labels.dedup();
        assert_eq!(labels.len(), 2);
        for s in &b.samples {
            let mut f = s.frame_indices.clone();
            f.sort_unstable();
            f.dedup();
            assert_eq!(f.len(), 4);
        }
        assert_eq!(b.frames(&idx, 0).shape(), &[4, 1, 4, 4]);
    }

    #[test]
    fn short_sequences_use_replacement() {
        let idx = index(3);
        let b = sample_batch(&idx, 1, 1, 8, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(b.samples[0].frame_indices.len(), 8);
        assert!(b.samples[0].frame_indices.iter().all(|&i| i < 3));
    }

    #[test]
    fn deterministic_and_checked() {
        let idx = index(10);
        let a = sample_batch(&idx, 3, 2, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_batch(&idx, 3, 2, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(sample_batch(&idx, 4, 2, 5, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
        assert!(sample_batch(&idx, 1, 3, 5, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }
}
