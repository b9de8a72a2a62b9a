//! Pixel-wise policy optimisation for a small pixel-space diffusion model.
//!
//! A class-conditional denoiser is pretrained on procedural scenes, then
//! fine-tuned with per-pixel reward maps: every pixel's trajectory
//! log-likelihood is weighted by that pixel's own reward, instead of scaling
//! the whole-image log-likelihood by one scalar.

pub mod autodiff;
pub mod datasets;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod harness;
pub mod net;
pub mod policy;
pub mod rewards;

pub use error::{Error, Result};
