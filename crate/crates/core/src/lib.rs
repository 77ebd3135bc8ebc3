//! Autoregressive denoising diffusion forecaster for multivariate time
//! series.
//!
//! A recurrent encoder summarises the (mean-scaled) history and covariates
//! into a state `h`; a conditional noise-prediction network trained by
//! noise matching turns Gaussian noise into a sample of the next time step
//! via annealed Langevin sampling. Forecasts are rolled out
//! autoregressively and scored with CRPS / CRPS-sum.

pub mod denoiser;
pub mod diffusion;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod numcore;
pub mod pipeline;
pub mod synthetic;

pub use error::{Error, ErrorClass, Result};
