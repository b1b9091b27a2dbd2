//! Saliency-guided pseudo-anomaly augmentation with two-head deviation scoring.

pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod saliency;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
