//! Training-free image stylization on a toy diffusion model.
//!
//! The crate provides a dense-tensor kernel layer with reverse-mode
//! autodiff, a small U-Net noise predictor with observable attention, a
//! deterministic sampler with its inverse, attention-feature injection for
//! stylization, structure/color metrics, and a procedural dataset plus
//! trainer so the whole pipeline runs from scratch on a CPU.

pub mod autodiff;
pub mod dataset;
pub mod ddim;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod style;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
