use thiserror::Error;

/// Errors produced by the estimation engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EdvcmError {
    #[error("grid cell (d={d}, t={t}) is outside the triangle for D={max_duration}")]
    GridIndex { d: u32, t: u32, max_duration: u32 },

    #[error("lag cell (d={d}, l={l}) is outside the {max_duration}x{max_lag} lag grid")]
    LagIndex { d: u32, l: u32, max_duration: u32, max_lag: u32 },

    #[error("unit {unit_id}: {reason}")]
    Structure { unit_id: String, reason: String },

    #[error("invalid hyperparameter {name}={value}: must be strictly positive and finite")]
    Hyperparameter { name: &'static str, value: f64 },

    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not positive definite after jitter {jitter:e}: smallest pivot {pivot:e} at row {row}")]
    NotPositiveDefinite { row: usize, pivot: f64, jitter: f64 },

    #[error("unsupported prior: {0}")]
    Prior(String),

    #[error("non-finite log posterior: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("duration {0} is not available")]
    Duration(u32),

    #[error("model is not identifiable: {0}")]
    NotIdentifiable(String),

    #[error("singular information matrix")]
    Singular,

    #[error("matching failed: {0}")]
    Matching(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, EdvcmError>;

impl From<std::io::Error> for EdvcmError {
    fn from(e: std::io::Error) -> Self {
        EdvcmError::Io(e.to_string())
    }
}

impl From<csv::Error> for EdvcmError {
    fn from(e: csv::Error) -> Self {
        EdvcmError::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for EdvcmError {
    fn from(e: serde_json::Error) -> Self {
        EdvcmError::Parse(e.to_string())
    }
}
