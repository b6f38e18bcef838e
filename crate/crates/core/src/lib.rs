//! Two-branch feature disentanglement for pixel-wise satellite image time
//! series classification with labeled source and target domains.

// Validation is written as `!(x > 0.0)` on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradsuite;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod probe;
pub mod refed;
pub mod report;
pub mod synth;
pub mod tempcnn;
pub mod train;

pub use error::{Error, FormatError, Result};
