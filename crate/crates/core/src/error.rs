use thiserror::Error;

/// Errors produced by the loss, metric, benchmark and search routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

    #[error("value {0} is outside the domain [0, 1]")]
    Domain(f64),

    /// The batch has no positive predictions, so the AP normalizer is zero.
    #[error("batch contains no positive predictions")]
    EmptyPositive,

    #[error("training diverged at step {step}: {reason}")]
    TrainingDiverged { step: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
