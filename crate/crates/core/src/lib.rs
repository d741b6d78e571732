//! Style-consistent autoregressive indoor scene synthesis.

pub mod assets;
pub mod embed;
pub mod error;
pub mod evaluator;
pub mod likelihoods;
pub mod mesh;
pub mod model;
pub mod nn;
pub mod render;
pub mod scene;
#[cfg(feature = "service")]
pub mod service;
pub mod synthesizer;
pub mod toyworld;
pub mod trainer;

pub use error::{Error, Result};
