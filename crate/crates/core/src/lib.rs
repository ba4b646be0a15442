//! Low-rank determinantal point processes trained by maximum likelihood or by
//! minimizing a Wasserstein distance through a differentiable DPP-VFX sampler.

pub mod diffmath;
pub mod dpp;
pub mod error;
pub mod evaluation;
pub mod samplers;
pub mod data;
pub mod training;
pub mod transport;

pub use dpp::{KernelFactor, MarginalKernel, Subset};
pub use error::{Error, Result};
