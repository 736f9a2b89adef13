//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-contract input (bad shapes, non-finite values,
    /// rows that do not sum to one, parse failures).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A routing budget that cannot be satisfied (k out of range, caps below
    /// the requested total).
    #[error("budget infeasible: {0}")]
    BudgetInfeasible(String),

    /// Pearson correlation requested on degenerate data.
    #[error("correlation undefined: {0}")]
    CorrelationUndefined(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {reason}")]
    TrainingDiverged { step: usize, reason: String },

    /// Checkpoint or snapshot could not be decoded.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
