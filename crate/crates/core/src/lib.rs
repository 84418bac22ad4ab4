//! Coarse-to-fine demosaicing for HybridEVS sensors.
//!
//! A HybridEVS sensor lays a Quad Bayer color filter over the pixel array and
//! replaces two pixels per 4x4 tile with event pixels that carry no color
//! sample. This crate reconstructs RGB images from such mosaics with a
//! two-stage network (a convolutional coarse demosaicer followed by a
//! transformer pixel-correction stage), and ships the surrounding machinery:
//! raw codec, defect-aware data synthesis, progressive training, metrics and
//! a batch CLI.
//!
//! All numeric kernels are generic over the scalar type via [`num::Scalar`];
//! `f32` is the training precision and `f64` is used for gradient checks.

pub mod baseline;
pub mod checkpoint;
pub mod coarse;
pub mod codec;
pub mod config;
pub mod correction;
pub mod data;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod num;
pub mod optim;
pub mod pattern;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
pub use image::{DefectMap, RawImage, RgbImage};
pub use pattern::{CfaColor, PatternSpec};

/// Default training/inference precision.
pub type F = f32;

/// Coarse network at training precision.
pub type CoarseNet = coarse::CoarseNet<F>;
/// Correction network at training precision.
pub type CorrectionNet = correction::CorrectionNet<F>;
/// Full two-stage model at training precision.
pub type DemosaicFormer = model::DemosaicFormer<F>;
