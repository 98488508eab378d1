use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Stream(#[from] std::io::Error),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("trial artifact: {0}")]
    Artifact(String),

    #[error("vocabulary mismatch: expected {expected} rows, found {found}")]
    VocabMismatch { expected: usize, found: usize },

    #[error("kernel banks differ between trials")]
    KernelMismatch,

    #[error("need at least {needed} trials, got {got}")]
    TooFewTrials { needed: usize, got: usize },

    #[error("insufficient pool for pattern {pattern}: need {needed}, have {available}")]
    InsufficientPool {
        pattern: crate::analysis::Pattern,
        needed: usize,
        available: usize,
    },

    #[error("corpus is empty")]
    EmptyCorpus,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
