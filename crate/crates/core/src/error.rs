use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid identifier {0:?}: must be non-empty and contain no whitespace")]
    InvalidId(String),

    #[error("invalid token matrix: {0}")]
    InvalidMatrix(String),

    #[error("non-finite value {value} at position {position}")]
    NonFinite { value: f64, position: usize },

    #[error("NaN cannot be encoded as binary16")]
    NanEncode,

    #[error("binary16 pattern {0:#06x} is a NaN")]
    NanDecode(u16),

    #[error("dimension mismatch: expected {expected}, found {found}{}", context_suffix(.context))]
    DimMismatch {
        expected: usize,
        found: usize,
        context: Option<String>,
    },

    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNormRow { row: usize },

    #[error("empty document collection")]
    EmptyCollection,

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("unknown document id {0:?}")]
    UnknownDoc(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("invalid file contents: {0}")]
    Format(String),

    #[error("{}:{line}: {message}", .path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<input>".into()))]
    Parse {
        path: Option<PathBuf>,
        line: usize,
        message: String,
    },

    #[error("empty query")]
    EmptyQuery,

    #[error("missing teacher score for query {query:?}, document {doc:?}")]
    MissingTeacherScore { query: String, doc: String },

    #[error("not enough eligible negatives for query {query:?}: need {needed}, found {available}")]
    InsufficientNegatives {
        query: String,
        needed: usize,
        available: usize,
    },

    #[error("query {0:?} appears in the run but not in the qrels")]
    QueryNotInQrels(String),

    #[error("missing embedding for {0:?}")]
    MissingEmbedding(String),

    #[error("arithmetic overflow: {0}")]
    Overflow(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn context_suffix(context: &Option<String>) -> String {
    match context {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
