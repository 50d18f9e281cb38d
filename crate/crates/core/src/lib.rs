//! Confidence-guided residual-shifting diffusion for blind text-image
//! super-resolution.
//!
//! The pipeline couples two diffusion chains: a Gaussian chain over image
//! latents whose forward process shifts toward the degraded observation's
//! residual, and a categorical chain over character sequences. A fusion
//! module conditions the image denoiser on confidence-weighted text states,
//! and a text decoder reads the denoiser's features back into character
//! predictions, so both modalities refine each other step by step.

pub mod codec;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod fusion;
pub mod image;
pub mod image_diffusion;
pub mod imgproc;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod ocr;
pub mod rng;
pub mod sampler;
pub mod schedules;
pub mod text_diffusion;
pub mod trainer;

pub use error::{Error, Result};
