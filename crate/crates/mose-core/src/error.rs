//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by tensor/tape operations.
#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value encountered in {context}: {detail}")]
    NonFinite { context: &'static str, detail: String },
}

/// Errors raised by the coupling solvers.
#[derive(Debug, Error)]
pub enum SolverError {
    #[error("infeasible instance: {0}")]
    Infeasible(String),
    #[error("invalid solver input: {0}")]
    InvalidInput(String),
    #[error("solver failed to converge: {0}")]
    NoConvergence(String),
}

/// Errors raised by model construction and forward passes.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Errors raised by training.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Errors raised by dataset generation and the on-disk container.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: field `{field}`: {detail}")]
    Spec { field: &'static str, detail: String },
    #[error("dataset format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Errors raised by checkpoint serialization.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
