//! Particle-picture constructions of fractional Brownian motion, sub-fractional
//! Brownian motion, its negative counterpart and the odd part of fBm, together
//! with the exact covariance kernels the fluctuation fields converge to.
//!
//! Everything observable is a pairing of a random field with a step function
//! from [`step`]; kernels in [`kernels`] are evaluated through the closed-form
//! Fourier transforms of those steps.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimation;
pub mod kernels;
pub mod par;
pub mod oracles;
pub mod particles;
pub mod quad;
pub mod rng;
pub mod stable;
pub mod step;

pub use error::{Error, Result};
