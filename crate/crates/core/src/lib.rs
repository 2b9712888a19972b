//! Laplace-approximated Bayesian quantile regression for latent Gaussian models.

pub mod ald;
pub mod calibration;
pub mod curvature;
pub mod design;
pub mod error;
pub mod laplace;
pub mod mode;
pub mod quadrature;
pub mod sim;
pub mod studies;

pub use error::{Error, Result};
