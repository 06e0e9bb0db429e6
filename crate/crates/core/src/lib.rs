//! Exact-enumeration laboratory for reward-tilted distribution matching.
//!
//! Trajectory spaces are small enough to enumerate, so partition functions,
//! tilted targets, divergences and expected gradients are all computed
//! exactly and used to check the sampled estimators and trainers.

pub mod amortizer;
pub mod config;
pub mod env;
pub mod error;
pub mod estimator;
pub mod fixtures;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod trainers;
pub mod verify;

pub use error::{Error, Result};
