//! Gaze following from ViT attention maps.

pub mod archive;
pub mod backbone;
pub mod codec;
pub mod data;
mod error;
pub mod grid;
pub mod guidance;
pub mod heads;
pub mod interaction;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
mod scalar;
pub mod train;
pub mod viz;

pub use error::{Error, ErrorCategory, Result};
pub use scalar::Scalar;

pub type GazeModel32 = model::GazeModel<f32>;
pub type GazeModel64 = model::GazeModel<f64>;
pub type Checkpoint32 = train::Checkpoint<f32>;
pub type Checkpoint64 = train::Checkpoint<f64>;
pub type PredictionBundle32 = model::PredictionBundle<f32>;
pub type PredictionBundle64 = model::PredictionBundle<f64>;
