//! Cross-lingual vocabulary construction, tokenization and MLM masking.

mod mask;
mod tfidf;
mod vocab;

pub use mask::{mask_tokens, MaskSplit, MaskedBatch};
pub use tfidf::build_tfidf_vocab;
pub use vocab::{extend_embeddings, merge_vocab, Vocabulary, SPECIALS};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;

/// Lower-cases and splits on anything that is not alphanumeric.
/// Punctuation is dropped.
pub fn segment(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Fixed-length id sequence: `[CLS] tokens.. [SEP] [PAD]..`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// 1 for real positions, 0 for padding.
    pub attention: Vec<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn content_len(&self) -> usize {
        self.attention.iter().filter(|&&a| a == 1).count()
    }
}

/// Greedy longest-match lookup over word sequences; unknown words map to
/// `[UNK]`. Output is truncated so that it always ends in `[SEP]` and padded
/// to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
    let words = segment(text);
    let span = vocab.max_token_words();
    let mut ids = vec![CLS];
    let mut i = 0;
    while i < words.len() && ids.len() < max_len - 1 {
        let mut matched = None;
        for w in (1..=span.min(words.len() - i)).rev() {
            let candidate = words[i..i + w].join(" ");
            if let Some(id) = vocab.id(&candidate) {
                matched = Some((id, w));
                break;
            }
        }
        let (id, used) = matched.unwrap_or((UNK, 1));
        ids.push(id);
        i += used;
    }
    ids.push(SEP);
    let content = ids.len();
    ids.resize(max_len, PAD);
    let mut attention = vec![1u8; content];
    attention.resize(max_len, 0);
    TokenSequence { ids, attention }
}

/// Tokens of a sequence with special ids removed.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> Vec<String> {
    seq.ids
        .iter()
        .filter(|&&id| id >= NUM_SPECIALS)
        .map(|&id| vocab.token(id).to_string())
        .collect()
}
