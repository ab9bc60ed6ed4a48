use thiserror::Error;

/// Errors raised by the numerical and training routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("covariance is singular: {0}")]
    SingularCovariance(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("outside the domain of the operation: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("parameters outside the constraint set: {0}")]
    Constraint(String),

    #[error("optimization stalled at iteration {iter}: step size fell below {min_step:e}")]
    StalledOptimization {
        iter: usize,
        min_step: f64,
        trace: crate::stiefel::OptTrace,
    },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
