//! Kernel synthesizer blocks for video networks: tensors, reverse-mode
//! autodiff, fusion matrices, regularizers, and a small training harness.

pub mod approx;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod ops;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Shape5, Tensor5};
