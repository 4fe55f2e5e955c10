//! Deep utterance aggregation (DUA) for multi-turn response selection.
//!
//! The crate is organised bottom-up: [`numerics`] (tensors on a tape with
//! reverse-mode gradients), [`layers`], [`model`], then [`data`],
//! [`training`], [`eval`] and the [`baselines`] used for comparison.

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod export;
pub mod fixtures;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod tensor;
pub mod training;

pub use error::{DuaError, Result};
pub use tensor::Tensor;
