//! Resampled inference for MIMO detectors.
//!
//! A detector (exhaustive ML, LMMSE, K-best, or a small trained network) is
//! run on several statistically equivalent versions of one detection problem,
//! obtained from invariant transformations of `y = Hs + n`. The back-mapped
//! outputs are combined with minimum-variance weights `β = R⁻¹1 / (1ᵀR⁻¹1)`
//! computed from the error covariance `R` across transform channels.
//!
//! Module map:
//!
//! - [`mimo_model`]: constellations, Rayleigh channels, noise, real embedding.
//! - [`transforms`]: invariant transformations with forward maps and back-maps.
//! - [`detectors`]: exhaustive ML/MAP, LMMSE, QRM K-best and [`detectors::SoftOutput`].
//! - [`neural`]: a feed-forward detector trained from scratch.
//! - [`resampler`]: error covariance, optimal weights, combining, epistemic variance.
//! - [`harness`]: Monte Carlo sweeps, error analysis, and the CLI.

pub mod detectors;
mod error;
pub mod harness;
pub mod mimo_model;
pub mod neural;
pub mod resampler;
pub mod rng;
pub mod stats;
pub mod transforms;

pub use error::{Error, Result};

pub use num_complex::Complex64;

/// Dynamic complex matrix used for channels and unitary transforms.
pub type CMatrix = nalgebra::DMatrix<Complex64>;
/// Dynamic complex vector used for observations.
pub type CVector = nalgebra::DVector<Complex64>;

// The guide's code listings are compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/system_model.md")]
    mod system_model {}
    #[doc = include_str!("../../../book/src/transforms.md")]
    mod transforms {}
    #[doc = include_str!("../../../book/src/detectors.md")]
    mod detectors {}
    #[doc = include_str!("../../../book/src/combining.md")]
    mod combining {}
    #[doc = include_str!("../../../book/src/neural.md")]
    mod neural {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
