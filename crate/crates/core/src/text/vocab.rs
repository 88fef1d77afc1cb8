use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{segment, NUM_SPECIALS};
use crate::error::{shape_err, Error, Result};
use crate::numeric::Tensor;

pub const SPECIALS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Merged token set. Ids `0..5` are the specials, `5..en_size` the base
/// (English) tokens and `en_size..en_size + sp_size` the appended Spanish
/// tokens in rank order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
    en_size: usize,
    sp_size: usize,
    max_words: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, en_size: usize) -> Self {
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let max_words = tokens
            .iter()
            .skip(NUM_SPECIALS as usize)
            .map(|t| t.split(' ').count())
            .max()
            .unwrap_or(1);
        let sp_size = tokens.len() - en_size;
        Self {
            tokens,
            id_of,
            en_size,
            sp_size,
            max_words,
        }
    }

    /// Specials followed by the given tokens, which all count as base tokens.
    pub fn with_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            let t = t.into();
            if !all.contains(&t) {
                all.push(t);
            }
        }
        let n = all.len();
        Self::from_tokens(all, n)
    }

    /// Base vocabulary from a corpus: distinct words by descending frequency,
    /// ties lexicographic.
    pub fn from_corpus<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in segment(t.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::with_tokens(words.into_iter().map(|(w, _)| w))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Specials plus base tokens.
    pub fn en_size(&self) -> usize {
        self.en_size
    }

    /// Number of appended second-language tokens (M).
    pub fn sp_size(&self) -> usize {
        self.sp_size
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn max_token_words(&self) -> usize {
        self.max_words
    }

    /// One token per line; line `n` holds id `n + 5`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens[NUM_SPECIALS as usize..] {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s)?;
        Ok(())
    }

    /// Reads a vocabulary file; the first `en_count` lines are base tokens,
    /// the rest second-language tokens.
    pub fn read(path: &Path, en_count: Option<usize>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() || tokens.iter().any(|t| t == line) {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("line {}: empty or duplicate token", n + 1),
                });
            }
            tokens.push(line.to_string());
        }
        let en_size = en_count.map_or(tokens.len(), |c| NUM_SPECIALS as usize + c);
        if en_size > tokens.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("base count {en_size} exceeds {} tokens", tokens.len()),
            });
        }
        Ok(Self::from_tokens(tokens, en_size))
    }
}

/// Appends ranked second-language tokens; tokens already present are skipped
/// with a warning. Existing ids never change.
pub fn merge_vocab(en_vocab: &Vocabulary, sp_tokens: &[String]) -> Vocabulary {
    let mut tokens = en_vocab.tokens.clone();
    let mut seen: std::collections::HashSet<&str> = tokens.iter().map(String::as_str).collect();
    let mut added = Vec::new();
    for t in sp_tokens {
        if seen.contains(t.as_str()) {
            log::warn!("second-language token {t:?} already in vocabulary; skipped");
            continue;
        }
        seen.insert(t);
        added.push(t.clone());
    }
    tokens.extend(added);
    Vocabulary::from_tokens(tokens, en_vocab.en_size)
}

/// `[W_en; W_sp]` with `m` new rows drawn from `N(0, 0.02²)`.
pub fn extend_embeddings(w_en: &Tensor, m: usize, dim: usize, rng_seed: u64) -> Result<Tensor> {
    if w_en.rank() != 2 || w_en.shape()[1] != dim {
        return shape_err(
            "extend_embeddings",
            format!("embedding {:?} vs dim {dim}", w_en.shape()),
        );
    }
    extend_embeddings_with_std(w_en, m, 0.02, rng_seed)
}

pub(crate) fn extend_embeddings_with_std(
    w_en: &Tensor,
    m: usize,
    std: f64,
    rng_seed: u64,
) -> Result<Tensor> {
    let dim = w_en.shape()[1];
    let mut rng = crate::seed::rng(rng_seed);
    let mut data = w_en.data().to_vec();
    data.extend(Tensor::randn(&[m, dim], std, &mut rng).into_data());
    Tensor::new(vec![w_en.shape()[0] + m, dim], data)
}
