//! Transferable adversarial patches against classifier ensembles, and a
//! benchmark that scores arbitrary classifiers on the patched data.
//!
//! The pipeline has three stages: craft patches on an ensemble
//! ([`crafting`]), emit a perturbed dataset ([`datasets`]), and measure
//! clean accuracy, robust accuracy and success rate ([`metrics`]).

pub mod codec;
pub mod config;
pub mod crafting;
pub mod datasets;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod patchops;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
