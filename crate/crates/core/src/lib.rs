//! Asymmetric cycle-consistent image translation: networks, frozen perceptual
//! backends, losses, training loop and evaluation metrics on a small in-house
//! f64 tensor engine with reverse-mode differentiation.

pub mod autodiff;
pub mod backends;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Format version of checkpoints and run manifests.
pub const ARTIFACT_VERSION: u32 = 1;
