//! Graph normalization toolkit.

pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod harness;
pub mod linalg;
pub mod linear;
pub mod nn;
pub mod noise;
pub mod norm;
pub mod rng;
pub mod spectral;
pub mod svg;

pub use error::{Error, Result};
