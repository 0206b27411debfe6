//! Streaming guided-diffusion planning: a sample-predicting denoiser trained
//! under per-action noise levels, a rolling action queue that emits one
//! clean action per denoising step, and training-free obstacle guidance,
//! evaluated in a kinematic point-mass world.

pub mod campaign;
pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod engine;
pub mod env;
pub mod error;
pub mod guidance;
pub mod live;
pub mod sampler;
pub mod scenario;
pub mod schedule;

pub use error::{Error, Result};
