pub mod backbone;
pub mod cam;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod render;
pub mod synthgen;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use model::{ColonNet, Component, ModelConfig, Prediction, Predictor};
