//! Estimation of the integrated covolatility matrix `∫Σ(t)dt` from noisy, asynchronously
//! observed tick prices with the local method of moments.

pub mod efficiency;
pub mod error;
pub mod lmm;
pub mod marketdata;
pub mod mattensor;
pub mod simkit;
pub mod spectral;

pub use error::{Error, Result};
