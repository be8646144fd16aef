//! Tiny recursive reasoning models with stochastic test-time rollouts.

pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod puzzle;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
