//! Desk-scale grokking laboratory.
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipelines;
pub mod registry;
pub mod report;
pub mod stats;
pub mod svg;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
