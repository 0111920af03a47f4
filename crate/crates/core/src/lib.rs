//! Latent in-context forecasting of univariate time series.
//!
//! [`prior`] generates synthetic contexts, [`data`] maps series onto the
//! normalized time axis and output bins, [`model`] holds the network,
//! [`trainer`] optimizes it and [`eval`] measures forecasts and embeddings.

pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod prior;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use latpfn_autodiff as autodiff;
