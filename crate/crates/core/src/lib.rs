pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod recon3d;
pub mod training;

pub use error::{Error, Result};
