//! Sample weighting for imbalanced binary classification.

// `!(x > 0.0)` is used on purpose so that NaN fails validation, and the
// numeric kernels index several parallel arrays in one loop.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod bilevel;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod net;
pub mod seed;
pub mod stats;
pub mod weighting;

pub use error::{FossilError, Result};
