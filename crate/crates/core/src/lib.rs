//! Final-model-only training data attribution: a further-training gold
//! standard and the gradient-based methods that approximate it.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attributors;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod goldstd;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod solvers;
pub mod training;

pub use error::{Error, Result};
