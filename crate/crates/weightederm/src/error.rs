//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a structural invariant (shapes, orderings, labels).
    #[error("invalid input: {0}")]
    Validation(String),

    /// A configuration value is inconsistent or infeasible.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A numeric routine received non-finite input or produced garbage.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An iterative fit stopped without meeting its tolerance. The best
    /// iterate found is attached so callers can inspect or reuse it.
    #[error("fit did not converge: {message}")]
    FitNonConvergence {
        message: String,
        best: Box<crate::solver::FitResult>,
    },

    /// The fixed-point solver ran out of iterations; the residual trajectory
    /// is attached for diagnosis.
    #[error("fixed-point iteration did not converge: {message}")]
    SeNonConvergence {
        message: String,
        residual_history: Vec<f64>,
    },

    /// The scalar root in the trace equation could not be bracketed, which is
    /// the numerical signature of a diverging (nonexistent) estimator.
    #[error("estimator likely nonexistent: {0}")]
    EstimatorNonexistent(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code: 1 for usage/configuration problems, 2 for numeric
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Config(_) | Error::Io(_) | Error::Json(_) => 1,
            _ => 2,
        }
    }
}
