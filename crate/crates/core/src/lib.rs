//! LoRA-adapted one-stream ViT tracker and its average-IoU benchmark harness.
//!
//! All model math is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the production precision.

pub mod bbox;
pub mod config;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod frames;
pub mod head;
pub mod model;
pub mod pipeline;
pub mod numerics;
pub mod scalar;
pub mod selftest;

pub use bbox::BBox;
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = numerics::Tensor<f32>;
