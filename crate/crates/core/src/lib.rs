//! Stochastic image EPDiff on the unit square.
//!
//! Deterministic shooting of momentum and image, Stratonovich sampling of
//! noisy endpoint images, first-order moment equations, and estimation of
//! noise-field amplitudes by matching the predicted mean image to the
//! empirical mean of a sample.

pub mod epdiff;
pub mod error;
pub mod estimation;
pub mod fields;
pub mod io;
pub mod kernels;
pub mod moments;
pub mod noise_models;
pub mod sepda_sde;

pub use error::{Result, SepdaError};
