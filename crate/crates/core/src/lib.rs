//! Constrained multi-objective site selection for affordable-housing portfolios.

pub mod baselines;
pub mod citygen;
pub mod constraints;
pub mod cityfile;
pub mod domain;
pub mod env;
pub mod metrics;
pub mod error;
pub mod explore;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod reward;

pub use error::{Error, Result};
