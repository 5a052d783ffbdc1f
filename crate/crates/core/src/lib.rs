//! Forced-oscillation source location from generator terminal PMU data.

pub mod dynamics;
pub mod error;
pub mod bayes;
pub mod likelihood;
pub mod pipeline;
pub mod report;
pub mod simkit;
pub mod solver;
pub mod spectra;

pub use error::{Error, Result};
