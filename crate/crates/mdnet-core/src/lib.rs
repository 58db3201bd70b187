//! MD-Net: a multi-task fully convolutional network that jointly predicts
//! per-point motion attributes (unstable / moving / static) and dense local
//! feature descriptors, plus the surrounding tooling: dataset ingestion,
//! distillation training, segmentation metrics, a feature extraction and
//! matching pipeline, and two-view / trajectory evaluation.
//!
//! Everything runs on a small f64 tensor engine with reverse-mode
//! differentiation ([`autodiff`]); no GPU or external ML runtime.

pub mod autodiff;
pub mod dataset;
pub mod features;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod training;
