//! Learning kernels for surrogate models of dynamical systems.
//!
//! The pipeline: simulate or load a time series (`dynamics`), turn it into a
//! supervised one-step dataset by delay embedding (`embedding`), interpolate
//! the one-step map with a parameterized kernel (`kernels`, `regress`), tune
//! the kernel parameters by gradient descent on a cross-validation loss
//! (`metrics`, `train`), then forecast, reconstruct attractors, and quantify
//! uncertainty with the fitted surrogate.

pub mod dynamics;
pub mod embedding;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod regress;
pub mod train;

pub use error::{KflowError, Result};
