//! Noise robust GANs: learning clean-image generators from noisy images by
//! training a clean-image generator and a constrained noise generator
//! jointly, together with the noise simulation zoo, denoising pipelines, and
//! evaluation metrics around them.

pub mod checkpoint;
pub mod data;
pub mod denoise;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod generators;
pub mod image;
pub mod kv;
pub mod noise;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
