//! Hashing-based answer selection.
//!
//! Ranks candidate answers for a question with a small contextual encoder,
//! an attention composition layer, and a hashing layer that learns binary
//! matrix codes for answers. At serve time the codes are read from a
//! bit-packed store, so the encoder never runs on answers again: each
//! stored element costs one bit instead of a 32-bit float.
//!
//! Pipeline: token ids -> embedding -> encoder -> (questions) max-pooling,
//! (answers) tanh sharpening -> sign codes -> attention against the pooled
//! question vector -> cosine similarity -> triplet hinge training.

pub mod codestore;
pub mod composition;
pub mod data;
pub mod encoder;
pub mod error;
pub mod hashing;
pub mod matrix;
pub mod model;
pub mod objective;
pub mod serve;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::{Matrix, Scalar};
