//! Progressive confounder imputation with kernel-based unconfoundedness testing,
//! plus the causal effect estimators and metrics used to evaluate it.

pub mod bench;
pub mod data;
pub mod error;
pub mod harness;
pub mod estimators;
pub mod imputation;
pub mod kernel;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
