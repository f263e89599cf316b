use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {file}:{line}: {reason}")]
    Parse {
        file: String,
        line: usize,
        reason: String,
    },

    #[error("relation `{0}` has no template")]
    MissingTemplate(String),

    #[error("invalid template for `{relation}`: {reason}")]
    InvalidTemplate { relation: String, reason: String },

    #[error("empty graph")]
    EmptyGraph,

    #[error("{what} {index} out of range (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("zero query vector")]
    ZeroQuery,

    #[error("missing label for instance `{0}`")]
    MissingLabel(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a short description of the surrounding task.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Short stable identifier, used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::MissingTemplate(_) => "missing-template",
            Error::InvalidTemplate { .. } => "invalid-template",
            Error::EmptyGraph => "empty-graph",
            Error::OutOfRange { .. } => "out-of-range",
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::NonFinite(_) => "non-finite",
            Error::Empty(_) => "empty",
            Error::Diverged { .. } => "diverged",
            Error::Format(_) => "format",
            Error::ZeroQuery => "zero-query",
            Error::MissingLabel(_) => "missing-label",
            Error::Context { source, .. } => source.kind(),
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
