//! Joint detection of the four edge types — reflectance, illumination,
//! normal and depth — with a three-stage convolutional detector, its
//! class-balanced edge and focal attention losses, the SGD/poly training
//! recipe, and a self-contained ODS/OIS/AP evaluation bench.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod trainer;

pub use config::{Config, ModelConfig, TrainConfig};
pub use error::{Error, Result};
