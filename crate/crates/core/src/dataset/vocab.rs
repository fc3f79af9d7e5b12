use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::world::{self, MAX_CAPTION_LEN};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const BOS: usize = 2;
const LEN_BASE: usize = 3;
/// First id assigned to a lexicon word.
pub const FIRST_WORD: usize = LEN_BASE + MAX_CAPTION_LEN;

/// Id of the `LEN_k` conditioning token.
pub fn len_token(k: usize) -> usize {
    assert!((1..=MAX_CAPTION_LEN).contains(&k), "caption length {k} out of range");
    LEN_BASE + k - 1
}

/// Inverse of [`len_token`].
pub fn len_of_token(id: usize) -> Option<usize> {
    (LEN_BASE..FIRST_WORD).contains(&id).then(|| id - LEN_BASE + 1)
}

/// Word-level vocabulary: specials first, then the lexicon sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<S: AsRef<str>>(lexicon: &[S]) -> Self {
        let mut words: Vec<&str> = lexicon.iter().map(|w| w.as_ref()).collect();
        words.sort_unstable();
        words.dedup();
        let mut tokens: Vec<String> = vec!["<pad>".into(), "<e>".into(), "<s>".into()];
        tokens.extend((1..=MAX_CAPTION_LEN).map(|k| format!("LEN_{k}")));
        tokens.extend(words.into_iter().map(String::from));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// The vocabulary of the shapes-world grammar.
    pub fn standard() -> Self {
        Self::new(&world::lexicon())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange { id, vocab: self.len() })
    }

    /// PAD, BOS and the length tokens; never valid decoder outputs.
    pub fn is_structural(&self, id: usize) -> bool {
        id == PAD || id == BOS || len_of_token(id).is_some()
    }

    pub fn is_word(&self, id: usize) -> bool {
        id >= FIRST_WORD && id < self.len()
    }

    /// Lexicon words only; special token names are rejected.
    pub fn tokenize<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                let w = w.as_ref();
                self.id(w)
                    .filter(|&id| self.is_word(id))
                    .ok_or_else(|| Error::UnknownWord(w.to_string()))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&id| self.token(id).map(String::from)).collect()
    }

    /// Parses a whitespace-separated prefix such as `LEN_4 the color is`.
    pub fn parse_prefix(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|t| self.id(t).ok_or_else(|| Error::UnknownWord(t.to_string())))
            .collect()
    }
}
