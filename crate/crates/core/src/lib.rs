//! Spatial contrastive instruction tuning for a desk-scale 3D scene language
//! model: point-cloud ingestion, an object-centric scene encoder feeding a
//! small autoregressive language model, the odds-ratio contrastive objective,
//! triplet dataset construction, staged training and evaluation metrics.

pub mod autograd;
pub mod checkpoint;
pub mod dataset_forge;
pub mod error;
pub mod evaluation;
pub mod language_model;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod pointcloud;
pub mod scene_encoder;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
