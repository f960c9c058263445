use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes {found:?} at offset 0, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {version} at offset 4")]
    UnsupportedVersion { version: u32 },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    TruncatedFile { expected: u64, actual: u64 },

    #[error("trailing data: expected {expected} bytes, found {actual}")]
    TrailingData { expected: u64, actual: u64 },

    #[error("non-finite value at cell {index} (byte offset {offset})")]
    NonFiniteValue { index: usize, offset: u64 },

    #[error("empty matrix ({rows}x{dims})")]
    EmptyMatrix { rows: usize, dims: usize },

    #[error("data length {actual} does not match {rows}x{dims}")]
    ShapeMismatch {
        rows: usize,
        dims: usize,
        actual: usize,
    },

    #[error("malformed JSON on line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("duplicate id {id:?} on line {line}")]
    DuplicateId { id: String, line: usize },

    #[error("negative label {label} on line {line}")]
    NegativeLabel { label: i64, line: usize },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("label {label} out of range for {n_classes} classes (record {index})")]
    LabelOutOfRange {
        label: usize,
        n_classes: usize,
        index: usize,
    },

    #[error("class {class} has no samples")]
    MissingClass { class: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("group too small: {group} has {count} samples, need at least 2")]
    GroupTooSmall { group: &'static str, count: usize },

    #[error("class {class} has {available} candidate concepts, need k = {k}")]
    NotEnoughCandidates {
        class: usize,
        available: usize,
        k: usize,
    },

    #[error("unknown concept id {0:?}")]
    UnknownConcept(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

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
}
