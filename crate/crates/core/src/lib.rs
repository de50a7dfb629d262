//! Parallel MRI reconstruction toolkit: simulation of multi-coil
//! undersampled acquisitions, classical SENSE and zero-filled baselines,
//! ACS calibration, a learned sensitivity + denoiser pipeline with
//! hand-written gradients, and evaluation metrics.

pub mod calib;
pub mod complex;
pub mod cplx;
pub mod error;
pub mod eval;
pub mod learn;
pub mod recon;
pub mod sim;
pub mod transform;

pub use error::{Error, Result};
