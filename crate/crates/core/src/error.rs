use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown layer id `{0}`")]
    UnknownLayer(String),

    #[error("stop step {stop_at} outside [2, {total}]")]
    StopOutOfRange { stop_at: usize, total: usize },

    #[error("token index {index} out of range for {len} tokens")]
    TokenIndex { index: usize, len: usize },

    #[error("subject `{0}` spans more than one token; only single-token subjects are supported")]
    MultiTokenSubject(String),

    #[error("subject `{0}` not found in prompt tokens")]
    SubjectNotFound(String),

    #[error("empty record set")]
    EmptyRecords,

    #[error("missing capture: {0}")]
    MissingCapture(String),

    #[error("unrepresentable subject: {0}")]
    UnrepresentableSubject(String),

    #[error("image dimension mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    ImageDimensions {
        expected_w: u32,
        expected_h: u32,
        got_w: u32,
        got_h: u32,
    },

    #[error("failed to decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("inversion failed: {0}")]
    Inversion(String),

    #[error("mock spec rejected: {0}")]
    MockSpec(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("embedder failure: {0}")]
    Embedder(String),

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("external generator failed: {0}")]
    Generator(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("array container error: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
