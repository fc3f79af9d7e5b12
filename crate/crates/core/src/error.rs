use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("scene placement failed: no object could be placed (seed {seed})")]
    Placement { seed: u64 },

    #[error("caption of length {length} unavailable for object {object}")]
    Unavailable { object: usize, length: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("unknown word `{0}`")]
    UnknownWord(String),

    #[error("caption of {words} words does not fit a sequence of {max_len} tokens")]
    CaptionTooLong { words: usize, max_len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint header: {0}")]
    Header(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid prompt input: {0}")]
    Prompt(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
