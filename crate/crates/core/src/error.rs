use std::path::PathBuf;

use thiserror::Error;

/// Broad failure classes; the CLI maps these onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad arguments or configuration.
    Usage,
    /// Input data is malformed or inconsistent.
    Data,
    /// Training or evaluation produced non-finite values.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),

    #[error("duplicate edge `{parent}` -> `{child}`")]
    DuplicateEdge { parent: String, child: String },

    #[error("edge `{parent}` -> `{child}` references unknown node `{missing}`")]
    DanglingEdge {
        parent: String,
        child: String,
        missing: String,
    },

    #[error("cycle detected: {}", .0.join(" -> "))]
    Cycle(Vec<String>),

    #[error("taxonomy has no root")]
    NoRoot,

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("graph too small: {0}")]
    TooSmall(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("missing embedding for node `{0}`")]
    MissingEmbedding(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("checkpoint box dimension {checkpoint} does not match configured dimension {configured}")]
    CheckpointDimMismatch { checkpoint: usize, configured: usize },

    #[error("backward called without a training-mode forward trace")]
    MissingTrace,

    #[error("non-finite {what} (instance `{instance}`)")]
    NonFinite { what: String, instance: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_)
            | Error::UnknownConfigKey(_)
            | Error::TooSmall(_)
            | Error::CheckpointDimMismatch { .. } => ErrorClass::Usage,
            Error::NonFinite { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn parse(path: &std::path::Path, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
