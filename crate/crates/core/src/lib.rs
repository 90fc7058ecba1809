//! Uncertainty-quantification benchmark on a simulated single pendulum.
//!
//! Deep ensembles, concrete dropout and flipout Bayesian networks are trained
//! to predict the gravitational acceleration from 13 noisy lab measurements,
//! and their aleatoric and epistemic uncertainties are compared with
//! first-order error propagation.

pub mod error;
pub mod experiment;
pub mod io;
pub mod nn;
pub mod pendulum;
pub mod metrics;
pub mod propagation;
pub mod uq;

pub use error::{Error, Result};
