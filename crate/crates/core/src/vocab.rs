use crate::error::{Error, Result};

const DIGITS: &str = "0123456789";
const LETTERS: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";
const PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]_`~";

/// Token id.
pub type TokenId = usize;

/// Recognition alphabet: 10 digits, 52 cased letters, 28 punctuation marks
/// and `<EOS>` make up the 91 output classes. `<start>` and `<pad>` are
/// input-only tokens appended after the classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocab {
    pub fn standard() -> Self {
        Self {
            chars: DIGITS.chars().chain(LETTERS.chars()).chain(PUNCTUATION.chars()).collect(),
        }
    }

    /// Builds a vocabulary from an explicit character list (as stored in
    /// checkpoints).
    pub fn from_chars(chars: &str) -> Result<Self> {
        let chars: Vec<char> = chars.chars().collect();
        let mut sorted = chars.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != chars.len() || chars.is_empty() {
            return Err(Error::Format("vocabulary characters must be unique and non-empty".into()));
        }
        Ok(Self { chars })
    }

    pub fn chars(&self) -> String {
        self.chars.iter().collect()
    }

    /// Number of output classes (characters plus `<EOS>`).
    pub fn num_classes(&self) -> usize {
        self.chars.len() + 1
    }

    /// Number of input tokens (classes plus `<start>` and `<pad>`).
    pub fn num_tokens(&self) -> usize {
        self.chars.len() + 3
    }

    pub fn eos(&self) -> TokenId {
        self.chars.len()
    }

    pub fn start(&self) -> TokenId {
        self.chars.len() + 1
    }

    pub fn pad(&self) -> TokenId {
        self.chars.len() + 2
    }

    pub fn id_of(&self, c: char) -> Option<TokenId> {
        self.chars.iter().position(|&x| x == c)
    }

    pub fn contains(&self, c: char) -> bool {
        self.id_of(c).is_some()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                self.id_of(c)
                    .ok_or_else(|| Error::Input(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Maps ids back to text, stopping at `<EOS>` and skipping other
    /// special tokens.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .take_while(|&&id| id != self.eos())
            .filter_map(|&id| self.chars.get(id))
            .collect()
    }
}
