//! Character-level vocabulary with reserved special ids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const NUM_SPECIALS: usize = 4;

/// Bijective char <-> id map; ids below [`NUM_SPECIALS`] are reserved and are
/// never produced by encoding raw text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    /// Printable ASCII (0x20..=0x7E) mapped from id 4 upward.
    pub fn ascii() -> Self {
        Vocab {
            chars: (0x20u8..=0x7e).map(char::from).collect(),
        }
    }

    /// Rebuilds a vocab from its charset string (checkpoint loading).
    pub fn from_charset(charset: &str) -> Result<Self> {
        let chars: Vec<char> = charset.chars().collect();
        let mut seen = std::collections::HashSet::new();
        for &c in &chars {
            if !seen.insert(c) {
                return Err(Error::Config(format!("duplicate character {c:?} in charset")));
            }
        }
        Ok(Vocab { chars })
    }

    pub fn charset(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn size(&self) -> usize {
        NUM_SPECIALS + self.chars.len()
    }

    pub fn id_of(&self, ch: char) -> Option<u32> {
        self.chars
            .iter()
            .position(|&c| c == ch)
            .map(|i| (i + NUM_SPECIALS) as u32)
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        (id as usize)
            .checked_sub(NUM_SPECIALS)
            .and_then(|i| self.chars.get(i).copied())
    }

    /// Encodes raw text; never emits special ids.
    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = Vec::with_capacity(text.len());
        for (offset, ch) in text.chars().enumerate() {
            match self.id_of(ch) {
                Some(id) => ids.push(id),
                None => return Err(Error::Encoding { ch, offset }),
            }
        }
        let char_len = ids.len();
        Ok(TokenSequence { ids, char_len })
    }

    /// Decodes ids back to text, skipping special ids.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().filter_map(|&id| self.char_of(id)).collect()
    }
}

/// A token id sequence plus the character length of its decoded text
/// (specials stripped). For raw char-level encodings the two lengths match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub char_len: usize,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<u32>, vocab: &Vocab) -> Self {
        let char_len = vocab.decode(&ids).chars().count();
        TokenSequence { ids, char_len }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
