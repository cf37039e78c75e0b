//! Two-stream graph convolutional network for per-cell segmentation of
//! triangle meshes.

// Test oracles index explicitly to mirror the formulas they check.
#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod knn;
pub mod mesh;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
