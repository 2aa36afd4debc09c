use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("line {line} is not valid UTF-8")]
    Encoding { line: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} at position {position} is outside the vocabulary (size {vocab_size})")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab_size: usize,
    },

    #[error("sequence of length {len} exceeds max_seq_len {max_seq_len}")]
    SequenceTooLong { len: usize, max_seq_len: usize },

    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("checkpoint config does not match: {}", fields.join(", "))]
    ConfigMismatch { fields: Vec<String> },

    #[error("no sentence has at least {0} words")]
    NoPrefixCandidates(usize),

    #[error("every interpolation component assigns zero probability to '{word}' in sentence {sentence}")]
    ZeroProbability { word: String, sentence: usize },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl std::fmt::Display, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_string(),
            line,
            message: message.into(),
        }
    }
}
