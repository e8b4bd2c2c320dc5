//! Desk-scale laboratory for training image restoration networks with a
//! frozen diffusion model as an auxiliary naturalness and semantic loss.

pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod diffloss;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod hspace;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod restorer;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
