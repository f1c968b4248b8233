//! Video understanding on top of a frozen image-language stack.
//!
//! Frames are encoded independently by a frozen image encoder, pooled over
//! time (one token per patch position) and over space (one token per
//! frame), projected into the decoder's embedding space by two affine
//! adapters, and spliced into a `User: … Assistant:` prompt for a frozen
//! causal decoder. Only the adapters train.

pub mod adapters;
pub mod base;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod lm;
pub mod manifest;
pub mod pooling;
pub mod rng;
pub mod tensor;
mod transformer;
pub mod tuning;

pub use error::{Result, VillmError};
pub use tensor::Tensor;
