//! Structured probabilistic coding.
//!
//! Inputs are encoded as diagonal Gaussians directly in the label space and
//! trained with task NLL, a KL penalty toward a standard-normal prior, and a
//! batch-entropy regularizer over the predicted class marginal. The crate
//! also ships cross-entropy, confidence-penalty and VIB baselines, the
//! evaluation metrics, a deterministic Adamax trainer, and a harness that
//! runs seeded noise, limited-data and representation-quality studies.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod data;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
