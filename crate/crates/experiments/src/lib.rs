//! Experiment harness for `kronflow`: Gaussian-target KL simulations,
//! stochastic-network training and certification, bandit episodes, and their
//! CSV and SVG artifacts.

pub mod config;
pub mod data;
pub mod error;
pub mod output;
pub mod runner;
pub mod simulate;

pub use error::{Error, Result};
