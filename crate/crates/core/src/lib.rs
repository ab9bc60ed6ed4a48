//! Denoising score distillation at desk scale: an exact linear-Gaussian
//! sandbox and a small neural pipeline on 2-D data.

pub mod error;
pub mod gaussian;
pub mod metrics;
pub mod linalg;
pub mod nn;
pub mod adam;
pub mod checkpoint;
pub mod diffusion;
pub mod distill;
pub mod toy;
pub mod rng;
pub mod schedule;
pub mod stiefel;
pub mod theory;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use rng::SeedStream;
