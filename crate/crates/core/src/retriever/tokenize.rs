use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const START: u32 = 3;
pub const END: u32 = 4;
/// Ids below this value are reserved for special tokens.
pub const FIRST_REGULAR_ID: u32 = 5;

/// A tokenized text with per-position special-token flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub is_special: Vec<bool>,
    /// Source character range `[start, end)` of each token; empty for
    /// special tokens.
    pub text_spans: Vec<(usize, usize)>,
    /// Surface text of each token, used for rendering.
    pub pieces: Vec<String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions that are neither special nor padding.
    pub fn regular_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_special[i]).collect()
    }

    /// Pooling mask: every position except padding.
    pub fn attention_mask(&self) -> Vec<bool> {
        self.tokens.iter().map(|&t| t != PAD).collect()
    }

    /// Replaces the tokens at `positions` with `replacement`. Special
    /// positions are left alone.
    pub fn with_replaced(&self, positions: &[usize], replacement: u32) -> TokenSequence {
        let mut out = self.clone();
        for &p in positions {
            if p < out.len() && !out.is_special[p] {
                out.tokens[p] = replacement;
            }
        }
        out
    }

    /// Builds a sequence from raw parts, checking that the lengths agree.
    pub fn from_parts(
        tokens: Vec<u32>,
        is_special: Vec<bool>,
        text_spans: Vec<(usize, usize)>,
        pieces: Vec<String>,
    ) -> crate::Result<Self> {
        let n = tokens.len();
        for len in [is_special.len(), text_spans.len(), pieces.len()] {
            if len != n {
                return Err(crate::Error::DimensionMismatch { expected: n, found: len });
            }
        }
        Ok(TokenSequence { tokens, is_special, text_spans, pieces })
    }
}

/// Whitespace and punctuation tokenizer with hashed vocabulary ids.
///
/// Words are maximal runs of alphanumeric characters; every other
/// non-whitespace character is a token of its own. Ids are an FNV-1a hash
/// of the lowercased word folded into `FIRST_REGULAR_ID..vocab_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub vocab_size: u32,
    pub max_len: usize,
}

impl Tokenizer {
    pub fn new(vocab_size: u32, max_len: usize) -> Self {
        assert!(vocab_size > FIRST_REGULAR_ID, "vocabulary too small");
        assert!(max_len >= 2, "max_len must leave room for start/end");
        Tokenizer { vocab_size, max_len }
    }

    pub fn token_id(&self, word: &str) -> u32 {
        let h = fnv1a(word.to_lowercase().as_bytes());
        FIRST_REGULAR_ID + (h % u64::from(self.vocab_size - FIRST_REGULAR_ID)) as u32
    }

    /// Tokenizes `text` as `[start] words... [end]`, truncating words so the
    /// result fits `max_len`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        self.encode_padded(text, 0)
    }

    /// Like [`Tokenizer::encode`] and right-pads with `[pad]` up to
    /// `pad_to` positions (capped at `max_len`).
    pub fn encode_padded(&self, text: &str, pad_to: usize) -> TokenSequence {
        let words = split_words(text);
        let keep = words.len().min(self.max_len - 2);
        let mut seq = TokenSequence {
            tokens: vec![START],
            is_special: vec![true],
            text_spans: vec![(0, 0)],
            pieces: vec!["[sot]".into()],
        };
        for (start, end, word) in words.into_iter().take(keep) {
            seq.tokens.push(self.token_id(&word));
            seq.is_special.push(false);
            seq.text_spans.push((start, end));
            seq.pieces.push(word);
        }
        let end_at = text.chars().count();
        seq.tokens.push(END);
        seq.is_special.push(true);
        seq.text_spans.push((end_at, end_at));
        seq.pieces.push("[eot]".into());
        while seq.len() < pad_to.min(self.max_len) {
            seq.tokens.push(PAD);
            seq.is_special.push(true);
            seq.text_spans.push((end_at, end_at));
            seq.pieces.push("[pad]".into());
        }
        seq
    }
}

/// Splits text into `(char_start, char_end, word)` triples.
pub fn split_words(text: &str) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    let mut current: Option<(usize, String)> = None;
    for (pos, ch) in text.chars().enumerate() {
        if ch.is_alphanumeric() {
            current.get_or_insert_with(|| (pos, String::new())).1.push(ch);
            continue;
        }
        if let Some((start, word)) = current.take() {
            out.push((start, pos, word));
        }
        if !ch.is_whitespace() {
            out.push((pos, pos + 1, ch.to_string()));
        }
    }
    if let Some((start, word)) = current {
        let end = start + word.chars().count();
        out.push((start, end, word));
    }
    out
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
