//! Tree-ensemble laboratory: bagging, split-feature-subsetting (SFS) random
//! forests, and leaf-bounded (TRIM) ensembles, together with synthetic
//! data-generating processes and a seeded simulation harness.
//!
//! The core math (trees, ensembles, metrics) is generic over the scalar type
//! through [`Scalar`]; the harness and CLI run everything at `f64`.

pub mod analysis;
pub mod dataset;
pub mod dgp;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod scalar;
pub mod tree;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar type used by the harness and CLI.
pub type Real = f64;

pub type Dataset64 = dataset::Dataset<f64>;
pub type Tree64 = tree::Tree<f64>;
pub type Forest64 = ensemble::Forest<f64>;

pub type Dataset32 = dataset::Dataset<f32>;
pub type Tree32 = tree::Tree<f32>;
pub type Forest32 = ensemble::Forest<f32>;
