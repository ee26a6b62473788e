//! Spectral guidance for diffusion samplers.

pub mod benchmarks;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod linalg;
pub mod net;
pub mod oracles;
pub mod priors;
pub mod rng;
pub mod training;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
