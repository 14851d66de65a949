//! Conditional-distribution alignment under generalized label shift.
//!
//! The library estimates conditional discrepancies between domains with
//! kernel conditional mean embeddings (MCMD), recovers class-prior
//! importance weights with black-box shift estimation, and trains a
//! shallow invariant transformation plus classifier by full-batch
//! gradient descent on the combined minimum-uncertainty objective.

pub mod datagen;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod label_shift;
pub mod model;
pub mod numerics;
pub mod objectives;

pub use error::{Error, Result};
pub use kernels::{FeatureSet, KernelFamily, KernelSpec};
pub use numerics::{DenseMatrix, EigPair};
