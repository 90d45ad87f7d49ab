//! Bayesian-optimization-driven moving horizon estimation.
//!
//! A linear model's free entries are tuned by Bayesian optimization so
//! that the accumulated MHE cost over an observed record is minimized.
//!
//! - [`model`]: parameter templates and linear models
//! - [`sim`]: benchmark plants with seeded noise
//! - [`gp`]: Gaussian-process surrogate
//! - [`acquisition`]: expected improvement and its maximization
//! - [`mhe`]: window solver, Riccati update, trajectory sweep
//! - [`bomhe`]: the outer learning loop and the MAE metric
//! - [`cli`]: experiment configuration, file formats, and commands

pub mod acquisition;
pub mod bomhe;
pub mod cli;
pub mod error;
pub mod gp;
pub mod mhe;
pub mod model;
mod optim;
pub mod sim;

pub use error::{Error, Result};
