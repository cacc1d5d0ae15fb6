use thiserror::Error;

/// Errors raised by the calibration library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: size mismatches, non-finite values, probabilities out of range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Evaluation outside the domain of a transform or its conjugate.
    #[error("domain error: {0}")]
    Domain(String),

    /// Operation not defined for the given design or family.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Combinatorial guard tripped (enumeration too large).
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    /// Iterative solver did not converge.
    #[error("solver failure after {iterations} iterations, residual norm {residual:.3e}: {message}")]
    Solver {
        iterations: usize,
        residual: f64,
        message: String,
    },

    /// Calibration constraints cannot be met on the prior supports.
    #[error("infeasible problem: {0}")]
    Infeasible(String),

    /// Linear system is singular beyond ridge rescue.
    #[error("singular system: {0}")]
    Singular(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
