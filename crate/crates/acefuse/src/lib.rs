//! Average causal effect estimation that fuses a large main sample, where
//! some confounders are unmeasured, with a validation subsample that
//! records them.
//!
//! The validation data give a consistent initial estimator. The same
//! error-prone procedure, run on both samples, estimates zero, and the
//! difference is used as a control variate to shrink the variance of the
//! initial estimator.

pub mod data;
pub mod design;
mod error;
pub mod estimating;
pub mod estimators;
pub mod fusion;
pub mod matching;
pub mod sim;

pub use error::{Error, Result};
