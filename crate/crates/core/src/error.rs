use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate polyline")]
    DegeneratePolyline,

    #[error("polyline needs at least 2 distinct points, got {0}")]
    TooFewPoints(usize),

    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),

    #[error("normalized coordinate out of [0, 1] at node {index}: ({x}, {y})")]
    OutOfUnitRange { index: usize, x: f64, y: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty sampling: no reference line crosses either line (try a smaller d)")]
    EmptySampling,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema mismatch at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
