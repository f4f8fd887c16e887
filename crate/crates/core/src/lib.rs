//! Multi-stage cross-scale attention (MSCSA) for 3D U-Net lesion
//! segmentation, built on a small reverse-mode autodiff engine.
//!
//! - [`tensor`]: dense tensors and the gradient tape.
//! - [`mscsa`]: cross-scale attention over concatenated encoder stages.
//! - [`unet`]: the backbone, sliding-window inference and checkpoints.
//! - [`data`]: phantoms, NIfTI-1 I/O, folds and patch sampling.
//! - [`training`]: losses, Nesterov SGD and the training schemes.
//! - [`eval`]: Dice, lesion-wise F1 and CSV reports.
//! - [`gradcheck`], [`verify`]: finite-difference checks.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod mscsa;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod unet;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
