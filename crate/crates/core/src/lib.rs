//! Convolutional neural networks for scalar fields on icosahedral sphere meshes.

pub mod engine;
pub mod error;
pub mod experiments;
pub mod icosphere;
pub mod model;
pub mod sampler;
pub mod surfdata;
pub mod vec3;
pub mod verify;

pub use error::{Error, Result};
