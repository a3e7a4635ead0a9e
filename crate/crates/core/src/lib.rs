//! Parallel prefix-path embedding training.
//!
//! A small transformer encoder is forked into several paths by per-layer
//! learnable key/value prefixes. Each path yields an embedding; an MLP-softmax
//! head fuses them. Training alternates between fitting a variational
//! conditional-Gaussian mutual-information estimator on detached path
//! embeddings and updating the encoder against the frozen estimator, combined
//! with InfoNCE on the fused and the per-path embeddings.

pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod miest;
pub mod nn;
pub mod objectives;
pub mod parallel;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
