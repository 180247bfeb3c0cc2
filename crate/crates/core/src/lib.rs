//! Transformer with a differentiable stack-attention sublayer, trained on
//! deterministic context-free transduction tasks.

pub mod attention;
pub mod error;
pub mod export;
pub mod model;
pub mod numerics;
pub mod stack;
pub mod tasks;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
