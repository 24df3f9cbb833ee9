use std::io;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mask: row {row} has no valid positions")]
    InvalidMask { row: usize },
    #[error("empty loss: no unmasked target positions")]
    EmptyLoss,
    #[error("perturbation of {param}[{index}] produced a non-finite loss")]
    Perturbation { param: String, index: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("role error: {0}")]
    Role(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged at step {step}: non-finite loss")]
    Divergence { step: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
