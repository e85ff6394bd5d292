//! Core library for deeptour: dense reverse-mode autodiff, the next-node
//! construction model, instance tooling, training, decoding, scaling-law
//! fitting, and interpretability analyses.

pub mod analysis;
pub mod autodiff;
pub mod instances;
pub mod model;
pub mod scaling;
pub mod decoding;
pub mod training;

pub use model::{ModelConfig, ModelParams};
