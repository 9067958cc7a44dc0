//! Kernels for calibrating open-vocabulary segmentation against a frozen
//! vision-language teacher: synonym diversification, text-guided distillation,
//! segmentation losses, a small trainable model and evaluation.

pub mod config;
pub mod distill;
pub mod diversify;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
mod io;
pub mod losses;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
pub use ndarray;
