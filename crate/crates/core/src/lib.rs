pub mod encoders;
pub mod ggu;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
mod nn;
pub mod numerics;
pub mod params;
pub mod scene;
pub mod trm;

pub use model::{Model, ModelConfig, ModelError};
