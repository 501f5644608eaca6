//! Conditional diffusion models for spectrogram-style data: training,
//! fast exponential-integrator ODE sampling, top-k selection filtering,
//! traditional DSP augmentation baselines, and the file formats that tie
//! the pipeline together.

pub mod denoisers;
pub mod diffusion;
pub mod data;
pub mod dsp;
pub mod error;
pub mod numerics;
pub mod rng;
pub mod samplers;
pub mod schedule;
pub mod selection;
mod train;

pub use error::{Error, Result};
pub use numerics::Grid;
