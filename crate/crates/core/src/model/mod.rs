//! The animatable reconstruction model: configuration, inputs, network and
//! the mapping from raw attribute maps to Gaussians.

pub mod assemble;
pub mod bundle;
pub mod config;
pub mod reconstructor;

pub use assemble::{assemble_backward, assemble_gaussians, AssembleRecord};
pub use bundle::InputBundle;
pub use config::{ModelConfig, ATTRIBUTE_CHANNELS, INPUT_CHANNELS};
pub use reconstructor::{Reconstructor, Tape};
