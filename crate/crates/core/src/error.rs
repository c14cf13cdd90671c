//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid relevance matrix: {0}")]
    InvalidRelevance(String),

    #[error("line {line}: malformed JSON: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("line {line}: feature dimension {found}, expected {expected}")]
    LineDimension {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: hierarchy inconsistency: {message}")]
    Hierarchy { line: usize, message: String },

    #[error("line {line}: duplicate image_id {image_id:?}")]
    DuplicateImage { line: usize, image_id: String },

    #[error("line {line}: invalid record: {message}")]
    InvalidRecord { line: usize, message: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown subclass code {0}")]
    UnknownSubclass(u32),

    #[error("checkpoint format version {found}, expected {expected}")]
    CheckpointVersion { found: u64, expected: u64 },

    #[error("corrupt checkpoint {path}: {message}")]
    CorruptCheckpoint { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serialize(String),
}

impl Error {
    /// Stable machine-readable code printed by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "E_DIMENSION",
            Error::Degenerate(_) => "E_DEGENERATE",
            Error::InvalidConfig(_) => "E_CONFIG",
            Error::InvalidRelevance(_) => "E_RELEVANCE",
            Error::MalformedLine { .. } => "E_MALFORMED",
            Error::LineDimension { .. } => "E_LINE_DIMENSION",
            Error::Hierarchy { .. } => "E_HIERARCHY",
            Error::DuplicateImage { .. } => "E_DUPLICATE",
            Error::InvalidRecord { .. } => "E_RECORD",
            Error::InsufficientData(_) => "E_INSUFFICIENT",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::UnknownSubclass(_) => "E_UNKNOWN_SUBCLASS",
            Error::CheckpointVersion { .. } => "E_CHECKPOINT_VERSION",
            Error::CorruptCheckpoint { .. } => "E_CHECKPOINT_CORRUPT",
            Error::Io { .. } => "E_IO",
            Error::Serialize(_) => "E_SERIALIZE",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
