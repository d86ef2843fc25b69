use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure categories shared by every module.
///
/// The CLI maps [`Error::InvalidInput`] and [`Error::Config`] to exit code 2 and
/// everything numerical to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("unstable configuration: {0}")]
    Unstable(String),

    #[error("fixed-point iteration did not converge after {iterations} iterations (last change {change:e})")]
    NoConvergence { iterations: usize, change: f64 },

    #[error("operator is not diagonalizable (reconstruction error {0:e})")]
    NotDiagonalizable(f64),

    #[error("ill-conditioned system (condition estimate {0:e})")]
    IllConditioned(f64),

    #[error("eigensolver failure: {0}")]
    Eigen(String),

    #[error("output is not real (max imaginary part {0:e})")]
    NonReal(f64),

    #[error("infeasible design: {0}")]
    Infeasible(String),

    #[error("graph generation failed: {0}")]
    Generation(String),

    #[error("undefined rate: meter recorded no messages")]
    EmptyMeter,

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Whether this error stems from user-supplied configuration rather than numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_) | Error::Dimension { .. } | Error::Config { .. } | Error::Json(_)
        )
    }
}
