//! Continual semi-supervised learning with a task-conditioned hypernetwork
//! over the weights of Semi-ACGAN base models.

pub mod bench;
pub mod codec;
pub mod consolidation;
pub mod error;
pub mod gan;
pub mod hypernet;
pub mod rng;
pub mod runtime;
pub mod tensor;
mod wire;

pub use error::{Error, FormatError, Result};
