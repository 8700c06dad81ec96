//! Animatable sparse-view 3D Gaussian head reconstruction.

pub mod error;
pub mod geometry;
pub mod image;
pub mod loss;
pub mod model;
pub mod nn;
pub mod render;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
