//! Stochastic actor-executor-critic for image-to-image translation.
//!
//! From-scratch CPU stack: a reverse-mode autodiff tensor core, small conv
//! networks, an inpainting environment with PSNR/SSIM rewards, a replay
//! buffer, and a trainer that couples supervised/adversarial translation
//! losses with maximum-entropy off-policy RL.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the crate-root aliases fix `f64`, which the trainer and CLI use
//! throughout.

pub mod agent;
pub mod cli;
pub mod env;
pub mod nn;
pub mod replay;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

/// Default scalar type for training and evaluation.
pub type Elem = f64;

/// `f64` tensor.
pub type Tensor = tensor::Tensor<Elem>;
/// `f64` tape.
pub type Tape = tensor::tape::Tape<Elem>;
