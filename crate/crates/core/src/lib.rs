//! Hierarchical dual-strategy machine unlearning on a small LoRA-adapted
//! language model.

// Range checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod hierarchy;
pub mod model;
pub mod privacy;
pub mod report;

pub use error::{Result, UnlearnError};
