//! Spatio-temporal crowd anomaly analysis.

pub mod assignment;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod flow;
pub mod forest;
pub mod frame;
pub mod geometry;
pub mod pipeline;
pub mod region;
pub mod report;
pub mod spatial;
pub mod synth;
pub mod tracking;

pub use error::{Error, Result};
