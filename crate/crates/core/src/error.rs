use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("singular equation: {0}")]
    SingularEquation(String),

    #[error("numerical failure: {message} (residual {residual:e})")]
    NumericalFailure { message: String, residual: f64 },

    #[error("trajectory diverged at t = {time}: |y| = {norm:e}")]
    Divergence { time: f64, norm: f64 },

    #[error("size guard: {0}")]
    SizeGuard(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("integrity failure: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn numerical(message: impl Into<String>, residual: f64) -> Self {
        Error::NumericalFailure {
            message: message.into(),
            residual,
        }
    }
}

pub(crate) fn ensure_dim(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::InvalidArgument(format!(
            "{what}: dimension {got} does not match expected {expected}"
        )));
    }
    Ok(())
}
