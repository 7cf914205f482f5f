//! Numerical verification toolkit for pointwise Wasserstein robustness of
//! conditional generative models on linear-Gaussian inverse problems.
//!
//! The crate provides:
//! - analytic Gaussian-mixture machinery (densities, evidence, posteriors),
//! - MAP/MMSE point estimators for the two-mode toy problem,
//! - exact and batched Wasserstein-1 solvers with dual certificates,
//! - a conditional affine-coupling flow with forward-KL training,
//! - estimation of every constant in the pointwise robustness bound and
//!   emission of robustness certificates.

pub mod assignment;
pub mod certify;
pub mod cli;
pub mod condflow;
pub mod error;
pub mod estimators;
pub mod gmm;
pub mod quad;
pub mod transport;
pub mod util;

pub use error::{Error, Result};
