//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by BOS, EOS,
//! and PAD. Every digit and letter is a single token by construction.

use serde::{Deserialize, Serialize};

/// Vocabulary size under the byte tokenizer: 256 bytes + BOS + EOS + PAD.
pub const VOCAB_SIZE: usize = 259;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u16);

pub const BOS: TokenId = TokenId(256);
pub const EOS: TokenId = TokenId(257);
pub const PAD: TokenId = TokenId(258);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn from_byte(b: u8) -> TokenId {
        TokenId(b as u16)
    }

    pub fn is_special(self) -> bool {
        self.0 >= 256
    }
}

/// UTF-8 bytes mapped one-to-one to ids 0..=255, with BOS prepended.
pub fn encode(text: &str) -> Vec<TokenId> {
    std::iter::once(BOS)
        .chain(text.bytes().map(TokenId::from_byte))
        .collect()
}

/// Lossy inverse of [`encode`]: special tokens are dropped, remaining bytes
/// are decoded as UTF-8 with replacement.
pub fn decode(tokens: &[TokenId]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|t| !t.is_special())
        .map(|t| t.0 as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
