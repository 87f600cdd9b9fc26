//! Bayesian model reduction for structured pruning of small neural networks.

// `!(x > 0.0)`-style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod criteria;
pub mod data;
pub mod distkit;
pub mod error;
pub mod experiment;
pub mod gate;
pub mod nn;
pub mod oracle;
pub mod prune;
pub mod report;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
