use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, HardnessTag, Sample, Vocab};
use crate::error::{invalid, Result};

/// Binary task with hardness known by construction.
///
/// Word `w0` cues class 0 and `w1` cues class 1; the remaining words are
/// filler. Easy samples repeat their class cue in at least 80% of the
/// positions and never contain the other cue. Hard samples contain both
/// cues and the class cue outnumbers the other by exactly one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub n_easy: usize,
    pub n_hard: usize,
    pub seq_len: usize,
    /// Number of content words, cues included.
    pub vocab: usize,
}

impl SyntheticSpec {
    pub fn new(n_easy: usize, n_hard: usize, seq_len: usize, vocab: usize) -> Self {
        Self {
            n_easy,
            n_hard,
            seq_len,
            vocab,
        }
    }

    fn easy_min_count(&self) -> usize {
        (self.seq_len * 4).div_ceil(5)
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    // Hard samples need one of each cue plus the extra majority cue.
    if spec.seq_len < 3 {
        return Err(invalid(format!(
            "seq_len {} too small for the easy/hard margins (need >= 3)",
            spec.seq_len
        )));
    }
    if spec.vocab < 3 {
        return Err(invalid(format!(
            "vocab {} too small: two cue words plus at least one filler",
            spec.vocab
        )));
    }
    if spec.n_easy + spec.n_hard == 0 {
        return Err(invalid("empty synthetic spec"));
    }
    let mut vocab = Vocab::default();
    let words: Vec<usize> = (0..spec.vocab).map(|i| vocab.intern(&format!("w{i}"))).collect();
    let cue = [words[0], words[1]];
    let filler = &words[2..];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = spec.seq_len;

    let mut rows = Vec::with_capacity(spec.n_easy + spec.n_hard);
    for i in 0..spec.n_easy {
        let label = i % 2;
        let count = rng.random_range(spec.easy_min_count()..=l);
        let mut tokens = vec![cue[label]; count];
        tokens.extend((count..l).map(|_| filler[rng.random_range(0..filler.len())]));
        tokens.shuffle(&mut rng);
        rows.push((tokens, label, HardnessTag::Easy));
    }
    for i in 0..spec.n_hard {
        let label = i % 2;
        let minority = rng.random_range(1..=(l - 1) / 2);
        let mut tokens = vec![cue[label]; minority + 1];
        tokens.extend(std::iter::repeat_n(cue[1 - label], minority));
        tokens.extend((2 * minority + 1..l).map(|_| filler[rng.random_range(0..filler.len())]));
        tokens.shuffle(&mut rng);
        rows.push((tokens, label, HardnessTag::Hard));
    }
    rows.shuffle(&mut rng);

    let samples = rows
        .into_iter()
        .enumerate()
        .map(|(id, (token_ids, label, tag))| Sample {
            id,
            token_ids,
            label,
            hardness: Some(tag),
        })
        .collect();
    Ok(Dataset {
        samples,
        vocab,
        num_classes: 2,
    })
}
