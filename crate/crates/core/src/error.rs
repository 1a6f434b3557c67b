use std::path::PathBuf;

use thiserror::Error;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the toolkit outside the per-example backend path.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("invalid prompt {prompt_id}: {reason}")]
    InvalidPrompt { prompt_id: String, reason: String },

    #[error("invalid prediction: {0}")]
    InvalidPrediction(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("missing probabilities for record {0}")]
    MissingProbs(String),

    #[error("missing margin for record {0}")]
    MissingMargin(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("mismatched support between distributions")]
    MismatchedSupport,

    #[error("degenerate input: {0}")]
    Degenerate(&'static str),

    #[error("too few records: need at least {needed}, got {got}")]
    TooFewRecords { needed: usize, got: usize },

    #[error("placeholder mismatch in variant {0}")]
    PlaceholderMismatch(usize),

    #[error("variant generation failed: obtained {obtained} of {requested} variants")]
    VariantGenerationFailed { requested: usize, obtained: usize },

    #[error("candidate generation failed: obtained {obtained} of {requested} candidates")]
    CandidateGenerationFailed { requested: usize, obtained: usize },

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
