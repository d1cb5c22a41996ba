//! Integration of a probability sample with a nonprobability sample.

pub mod benchmark;
pub mod composite;
pub mod error;
pub mod estimators;
pub mod io;
pub mod parallel;
pub mod pipeline;
pub mod propensity;
pub mod response_model;
pub mod simulator;
pub mod types;

pub use error::{Error, Result};
