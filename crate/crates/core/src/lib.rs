//! Rotationally symmetric hierarchical max-pooling models and the
//! convolutional networks that approximate them.

pub mod cnn;
pub mod compiler;
pub mod error;
pub mod exec;
pub mod files;
pub mod grid;
pub mod harness;
pub mod hmax;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
