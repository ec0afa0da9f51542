use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch between a model and its input or between operands.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// Invalid or inconsistent configuration values.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset is empty")]
    EmptyDataset,

    /// NMSE is undefined when every target is zero.
    #[error("all targets are zero; normalized error is undefined")]
    ZeroTargets,

    /// The Jacobi eigensolver exceeded its rotation budget.
    #[error(
        "eigendecomposition did not converge after {rotations} rotations \
         (off-diagonal mass {off:.3e}, target {target:.3e})"
    )]
    EigNonConvergence {
        rotations: usize,
        off: f64,
        target: f64,
    },

    /// Malformed binary data file (bad magic number, truncated payload, ...).
    #[error("{format} file {path}: {reason}")]
    DataFormat {
        format: &'static str,
        path: String,
        reason: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
