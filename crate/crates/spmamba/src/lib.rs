//! Toy-scale selective state-space object detector.
//!
//! Everything is f64 on the CPU: a closure-taped autodiff core, selective
//! scan and four-route 2-D scanning, the detector blocks built on them, exact
//! detection metrics, and a synthetic seafloor dataset generator. Nothing
//! here is fast by deep-learning standards; it is meant to be checkable.

pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
