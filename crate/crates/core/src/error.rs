use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("unsupported dimension {0} (only 2 and 3 are supported)")]
    UnsupportedDimension(usize),

    #[error("covariance {index} is not symmetric positive-definite: {reason}")]
    NotPositiveDefinite { index: usize, reason: String },

    #[error("matrix is singular or not positive-definite")]
    Singular,

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite objective or gradient at solver iteration {iteration}")]
    NonFinite {
        iteration: usize,
        last_good: Vec<f64>,
        last_value: f64,
    },

    #[error("registration failed at EM iteration {iteration}: {source}")]
    Registration {
        iteration: usize,
        trace: Vec<crate::registration::IterationRecord>,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
