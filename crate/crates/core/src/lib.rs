//! Bayesian size-biased modelling of discrete software testing data.
//!
//! Estimates the number of bugs in a program, their latent eventual sizes,
//! the remaining eventual bug size after testing, reliability at a size
//! threshold and the phase at which testing can stop.

pub mod engine;
pub mod error;
pub mod grouped;
pub mod io;
pub mod model;
pub mod predictive;
pub mod samplers;
pub mod sim;

pub use error::{Error, Result};
