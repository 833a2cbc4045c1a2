use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: malformed JSON at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("sizing error: {0}")]
    Sizing(String),

    #[error("mining error: {0}")]
    Mining(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("catalog error: unknown category name {0:?}")]
    UnknownCategory(String),

    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch for {path}: manifest {expected}, file {actual}")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("dataset hash mismatch: features were extracted from {features}, dump is {dump}")]
    HashMismatch { features: String, dump: String },

    #[error("training labels contain a single class ({0})")]
    DegenerateLabels(u8),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
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

    /// Stable machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Integrity(_) => "integrity",
            Error::Schema(_) => "schema",
            Error::Sizing(_) => "sizing",
            Error::Mining(_) => "mining",
            Error::Precondition(_) => "precondition",
            Error::UnknownCategory(_) => "catalog",
            Error::UnknownTemplate(_) => "template",
            Error::Format(_) => "format",
            Error::Checksum { .. } => "checksum",
            Error::DimensionMismatch { .. } => "dimension",
            Error::Alignment(_) => "alignment",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::DegenerateLabels(_) => "degenerate_labels",
            Error::Divergence { .. } => "divergence",
            Error::NonFinite(_) => "non_finite",
            Error::Invalid(_) => "invalid",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

/// Converts a serde_json error on `text` into a parse error carrying the byte offset.
pub(crate) fn parse_error(path: impl Into<PathBuf>, text: &str, err: &serde_json::Error) -> Error {
    Error::Parse {
        path: path.into(),
        offset: byte_offset(text, err.line(), err.column()),
        message: err.to_string(),
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}
