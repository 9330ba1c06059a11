//! Skeleton-agnostic autoregressive motion diffusion.
//!
//! The crate is organized around the data flow of the pipeline:
//!
//! - [`skeleton`]: topology, ancestor masks, 6D rotations, forward kinematics
//! - [`dataio`]: BVH parsing/writing, normalization, windowing, augmentation
//! - [`schedule`]: diffusion schedules, forward noising, DDIM, guidance
//! - [`nn`]: the f64 reverse-mode tape the denoiser and classifier run on
//! - [`denoiser`]: the UNet denoiser with ancestor-masked joint attention
//! - [`training`]: losses, the optimization loop, checkpoints
//! - [`generation`]: window sampling, autoregressive chaining, style blending
//! - [`metrics`]: Fréchet distance, diversity, foot plausibility, trajectory error
//! - [`config`]: layered run configuration shared with the CLI

pub mod config;
pub mod container;
pub mod dataio;
pub mod denoiser;
pub mod error;
pub mod generation;
pub mod metrics;
pub mod nn;
pub mod rngs;
pub mod schedule;
pub mod skeleton;
pub mod training;

pub use error::{Error, Result};

// Re-exported so downstream crates (CLI, benches, acceptance tests) build
// against one consistent set of numeric dependencies.
pub use nalgebra;
pub use ndarray;
pub use rand;
pub use rand_chacha;
