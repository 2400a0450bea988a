//! Domain-adversarial training of transformer encoders on multi-spectral,
//! multi-temporal sequences.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dann;
pub mod diagnostics;
pub mod data;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
