// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by model loading, inference, tracing, patching and evaluation.
#[derive(Error, Debug)]
pub enum Error {
    /// A required file is absent from the model directory.
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    /// A tensor or config entry disagrees with the architecture schema.
    #[error("schema violation: {0}")]
    SchemaViolation(String),

    /// A weight tensor contains NaN or infinity.
    #[error("corrupt weights: tensor `{0}` contains a non-finite value")]
    CorruptWeights(String),

    /// Encoded prompt does not fit into the positional table.
    #[error("prompt too long: {len} tokens > {max} positions")]
    PromptTooLong { len: usize, max: usize },

    #[error("unknown token id {id} (vocab size {vocab_size})")]
    UnknownToken { id: u32, vocab_size: usize },

    /// Cached plus new positions exceed `max_positions`.
    #[error("context overflow: {requested} positions > {max}")]
    ContextOverflow { requested: usize, max: usize },

    #[error("invalid selector: {0}")]
    InvalidSelector(String),

    #[error("subject {0:?} not found in prompt")]
    SubjectNotFound(String),

    /// Target prompt must contain the `{}` placeholder exactly once.
    #[error("bad target prompt: {0}")]
    BadTargetPrompt(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionError { expected: usize, actual: usize },

    /// Amplification produced a non-finite component.
    #[error("amplification produced a non-finite component ({0})")]
    Overflow(f32),

    #[error("cannot score empty text")]
    EmptyText,

    #[error("no precomputed embedding for text {0:?}")]
    MissingEmbedding(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("tensor container error: {0}")]
    Container(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code, used by the CLI exit codes and the HTTP error body.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingArtifact(_) => "missing_artifact",
            Error::SchemaViolation(_) => "schema_violation",
            Error::CorruptWeights(_) => "corrupt_weights",
            Error::PromptTooLong { .. } => "prompt_too_long",
            Error::UnknownToken { .. } => "unknown_token",
            Error::ContextOverflow { .. } => "context_overflow",
            Error::InvalidSelector(_) => "invalid_selector",
            Error::SubjectNotFound(_) => "subject_not_found",
            Error::BadTargetPrompt(_) => "bad_target_prompt",
            Error::DimensionError { .. } => "dimension_error",
            Error::Overflow(_) => "overflow",
            Error::EmptyText => "empty_text",
            Error::MissingEmbedding(_) => "missing_embedding",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Io { .. } => "io_error",
            Error::Json(_) => "json_error",
            Error::Csv(_) => "csv_error",
            Error::Container(_) => "container_error",
        }
    }

    /// True for failures that come from reading a model directory.
    pub fn is_load_error(&self) -> bool {
        matches!(
            self,
            Error::MissingArtifact(_)
                | Error::SchemaViolation(_)
                | Error::CorruptWeights(_)
                | Error::Container(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
