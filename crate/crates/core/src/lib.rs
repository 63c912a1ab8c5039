//! Contrastive self-supervised video quality pipeline.
//!
//! Synthetic distortions with resolution-independent class labels, temporal
//! wavelet packet augmentation, frozen per-frame spatial features, a GRU plus
//! projector trained with NT-Xent objectives, and a ridge-regression
//! evaluation harness reporting SROCC and logistic-fitted PLCC.

pub mod cli;
pub mod dataset;
pub mod distortion;
pub mod error;
pub mod eval;
pub mod features;
pub mod loss;
pub mod model;
pub mod selftest;
pub mod trainer;
pub mod video;
pub mod wavelet;

pub use error::{Error, Result};
