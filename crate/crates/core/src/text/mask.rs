use rand::Rng;

use super::{TokenSequence, MASK, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::seed;

/// How selected positions are corrupted; the remainder stays unchanged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSplit {
    pub mask: f64,
    pub random: f64,
}

impl Default for MaskSplit {
    fn default() -> Self {
        Self {
            mask: 0.8,
            random: 0.1,
        }
    }
}

/// Inputs with corrupted positions and their prediction targets.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub inputs: Vec<TokenSequence>,
    /// Original id at selected positions, -1 elsewhere.
    pub labels: Vec<Vec<i64>>,
}

impl MaskedBatch {
    pub fn labeled_positions(&self) -> usize {
        self.labels.iter().flatten().filter(|&&l| l >= 0).count()
    }
}

/// BERT-style corruption: every non-special position is selected with
/// probability `p`; selected positions become `[MASK]`, a uniformly random
/// non-special id, or stay as-is according to `split`.
pub fn mask_tokens(
    batch: &[TokenSequence],
    p: f64,
    rng_seed: u64,
    vocab_size: usize,
    split: MaskSplit,
) -> Result<MaskedBatch> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("mask probability {p} outside [0, 1]")));
    }
    if split.mask < 0.0 || split.random < 0.0 || split.mask + split.random > 1.0 {
        return Err(Error::Config(format!("invalid mask split {split:?}")));
    }
    if vocab_size <= NUM_SPECIALS as usize {
        return Err(Error::Config("vocabulary has no non-special tokens".into()));
    }
    let mut rng = seed::rng(rng_seed);
    let mut inputs = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for seq in batch {
        let mut ids = seq.ids.clone();
        let mut lab = vec![-1i64; ids.len()];
        for (pos, id) in ids.iter_mut().enumerate() {
            if seq.attention[pos] == 0 || *id < NUM_SPECIALS {
                continue;
            }
            if !rng.random_bool(p) {
                continue;
            }
            lab[pos] = i64::from(*id);
            let u: f64 = rng.random();
            if u < split.mask {
                *id = MASK;
            } else if u < split.mask + split.random {
                *id = rng.random_range(NUM_SPECIALS..vocab_size as u32);
            }
        }
        inputs.push(TokenSequence {
            ids,
            attention: seq.attention.clone(),
        });
        labels.push(lab);
    }
    Ok(MaskedBatch { inputs, labels })
}
