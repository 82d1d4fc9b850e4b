pub mod backbones;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod features;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raster;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
