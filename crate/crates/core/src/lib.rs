//! Tree-based particle smoothing for univariate hidden Markov models.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: the HMM abstraction and the two benchmark models.
//! - [`tree`]: the auxiliary binary tree over time indices `0..=T`.
//! - [`resample`]: log-weight normalisation and resampling schemes.
//! - [`density`]: univariate density estimates used as leaf targets.
//! - [`tps`]: the tree-based smoother and its three target families.
//! - [`baselines`]: bootstrap filter, FFBSm, FFBSi and the RTS smoother.
//! - [`oracle`]: discretised ground truth via forward-backward.
//! - [`metrics`]: MSE of means/variances, KS sums and the KL product gap.
//! - [`experiment`]: config-driven benchmark harness.

// `!(x > 0.0)` is used deliberately so NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod density;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod resample;
pub mod rng;
pub mod tps;
pub mod tree;

pub use error::{Error, Result};
