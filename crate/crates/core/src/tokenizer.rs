//! Byte-level tokenizer: ids `0..=255` are raw UTF-8 bytes, followed by four
//! reserved special tokens.

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const PAD: TokenId = 256;
pub const SEP: TokenId = 257;
pub const YES: TokenId = 258;
pub const NO: TokenId = 259;
pub const VOCAB_SIZE: usize = 260;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    /// Number of leading non-PAD tokens.
    pub real_len: usize,
}

impl TokenSequence {
    pub fn empty() -> Self {
        TokenSequence {
            ids: Vec::new(),
            real_len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_ids(&self) -> &[TokenId] {
        &self.ids[..self.real_len]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let ids: Vec<TokenId> = text.bytes().map(TokenId::from).collect();
        let real_len = ids.len();
        TokenSequence { ids, real_len }
    }

    /// Inverse of [`Tokenizer::tokenize`]. Special tokens are skipped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| id < 256)
            .map(|&id| id as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn is_special(id: TokenId) -> bool {
        id >= 256
    }
}

/// Right-pads with PAD (or truncates) to exactly `len` tokens.
pub fn pad_tokens(seq: &TokenSequence, len: usize) -> TokenSequence {
    debug_assert!(len >= 1, "padding length must be positive");
    let keep = seq.real_len.min(len);
    let mut ids = Vec::with_capacity(len);
    ids.extend_from_slice(&seq.ids[..keep]);
    ids.resize(len, PAD);
    TokenSequence {
        ids,
        real_len: keep,
    }
}
