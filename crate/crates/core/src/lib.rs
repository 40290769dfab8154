//! Continuous weak measurement of a driven qubit: Bayesian trajectory
//! simulation, detector modelling, and most-likely-path analysis.

pub mod analysis;
pub mod config;
pub mod detector;
pub mod dynamics;
pub mod error;
pub mod mlp;
pub mod pipeline;
pub mod rng;
pub mod simulator;

pub use dynamics::{BlochState, PhysicalParams, Propagator};
pub use error::{Error, Result};
