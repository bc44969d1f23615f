//! Tool-action conditioned tissue affordance heatmap prediction.
//!
//! An end-to-end desk-scale pipeline: a deterministic synthetic clip
//! generator stands in for annotated procedure video, polygon annotations
//! become peak-normalized Gaussian target heatmaps, a shifted-window
//! temporal encoder and a condition-modulated dense decoder produce
//! per-pixel affordance logits, and a boundary/logits metric suite with
//! ablation presets closes the loop.
//!
//! The numerical stack is self-contained: [`autodiff`] provides a small
//! reverse-mode tape over `ndarray` storage, generic over `f32`/`f64` so
//! training runs at single precision while gradient checks run at double.

pub mod autodiff;
pub mod conditioning;
pub mod data_model;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod export;
pub mod framestore;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod synthetic;
pub mod trainer;

pub use error::CoreError;
