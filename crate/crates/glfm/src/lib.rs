//! Generalized latent factor models fit by joint maximum likelihood.
//!
//! The model couples an `N x J` response matrix with low-rank natural
//! parameters `eta_ij = lambda_j . f_i` under an exponential-family response
//! distribution per cell. Because loadings and factors are only determined
//! up to an invertible `K x K` transform, estimation is performed under one
//! of six constraint schemes (0 through 5) that pin the rotation down;
//! uncertainty statements then account for the constraint through a
//! correction to the naive sandwich covariance.
//!
//! Modules:
//! - [`likelihood`]: response families and their log-density derivatives.
//! - [`constraints`]: constraint schemes, identifiability checks, and
//!   search-based counterexample oracles.
//! - [`canonicalize`]: transforms that move an arbitrary fit onto a scheme.
//! - [`estimate`]: alternating row-wise Newton fits.
//! - [`inference`]: covariance estimation and confidence intervals.
//! - [`simulate`]: synthetic designs and coverage experiments.
//! - [`io`]: CSV and JSON interchange plus the run manifest.

pub mod canonicalize;
pub mod constraints;
pub mod error;
pub mod estimate;
pub mod likelihood;

pub use error::{Error, Result};
