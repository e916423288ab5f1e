use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rotation: quaternion norm {norm} is not within tolerance of 1")]
    InvalidRotation { norm: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("timestamps not strictly increasing at index {index}")]
    NonMonotoneTimestamps { index: usize },

    #[error("empty window")]
    EmptyWindow,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("scale unobservable: numerical rank {rank} < {cols} columns")]
    UnobservableScale { rank: usize, cols: usize },

    #[error("initialization failed: {0}")]
    InitializationFailed(String),

    #[error("timestamp mismatch: {a} vs {b}")]
    TimestampMismatch { a: f64, b: f64 },

    #[error("degenerate alignment: {0}")]
    Alignment(String),

    #[error("numerical abort: {0}")]
    NumericalAbort(String),

    #[error("stream exhausted")]
    StreamExhausted,

    #[error("{}:{line}: {reason}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serialization(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
