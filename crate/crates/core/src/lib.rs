//! Tracking-by-attention with latent motion models.

pub mod boxes;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod hashing;
pub mod lmm;
pub mod metrics;
pub mod simulator;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
