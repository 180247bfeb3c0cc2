use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid action distribution at step {step}: {reason}")]
    InvalidAction { step: usize, reason: String },
    #[error("push index {index} outside 1..={n}")]
    PushIndex { index: usize, n: usize },
    #[error("parse error at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("task error: {0}")]
    Task(String),
    #[error("prediction has {pred} symbols but gold has {gold}")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
