use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("vocabulary size {requested} is too small: must exceed {minimum}")]
    VocabTooSmall { requested: usize, minimum: usize },

    #[error("token id {id} is out of range for a vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("corpus contains no words")]
    NoWords,

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite gradient in parameter group {group}")]
    NonFiniteGradient { group: String },

    #[error("tokenizer fingerprint mismatch: checkpoint has {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("loss became non-finite at step {step}; last good checkpoint retained")]
    Diverged {
        step: usize,
        last_good: Box<crate::model::Checkpoint>,
    },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }

    /// Attaches a file path to an error raised while handling that file.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
