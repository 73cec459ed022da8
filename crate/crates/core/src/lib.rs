//! Slow-fast stochastic evolution equations on 1D grids: hypothesis checks,
//! path simulation, averaging, skeleton dynamics, minimum-action rate functions
//! and Monte Carlo large-deviation experiments.

pub mod action;
pub mod averaging;
pub mod cli;
pub mod config;
pub mod error;
pub mod field;
pub mod hypotheses;
pub mod ldp;
pub mod manifest;
pub mod models;
pub mod parallel;
pub mod paths;
pub mod skeleton;

pub use error::{Error, Result};
