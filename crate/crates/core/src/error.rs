use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// An invariant of a configuration value does not hold. `field` names the
    /// offending field so the message can be surfaced verbatim.
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("invalid argument `{name}`: {message}")]
    InvalidArgument { name: &'static str, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no feasible configuration; tightest constraint is {constraint} ({detail})")]
    Infeasible { constraint: String, detail: String },

    #[error("search space is empty after filtering: {0}")]
    EmptySpace(String),

    #[error("KV cache overflow: layer {layer} holds {len} of {max} positions, {requested} more requested")]
    CacheOverflow {
        layer: usize,
        len: usize,
        max: usize,
        requested: usize,
    },

    #[error("tensor file: {0}")]
    Format(String),

    #[error("graph: {0}")]
    Graph(String),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn arg(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            message: message.into(),
        }
    }

    /// Stable machine-readable tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Validation { .. } => "validation",
            Error::InvalidArgument { .. } => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::Infeasible { .. } => "infeasible",
            Error::EmptySpace(_) => "empty_space",
            Error::CacheOverflow { .. } => "cache_overflow",
            Error::Format(_) => "format",
            Error::Graph(_) => "graph",
        }
    }
}
