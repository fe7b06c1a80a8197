//! Multi-class mean-field control.
//!
//! Mean-field propagation of population distributions, finite-population
//! simulation, closed-form approximation bounds with their certification,
//! natural policy gradient training and an experiment harness.

pub mod bounds;
pub mod distributions;
pub mod env_model;
pub mod error;
pub mod harness;
pub mod meanfield;
pub mod nagent_sim;
pub mod npg;
pub mod policy;
pub mod stats;

pub use error::{MfcError, Result};
