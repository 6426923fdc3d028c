//! Tensor-train regression with per-mode side information.
//!
//! The model family factorizes a sparse multi-way target into a chain of TT
//! cores, optionally maps each mode's covariates through an exact kernel or
//! a random Fourier feature approximation, and restores the flexibility lost
//! to side information through weighted latent regression (WLR) or latent
//! scaling (LS). Training is an EM-style block-coordinate loop over
//! parameter groups with Adam updates; a variational Bayesian layer with
//! closed-form reconstruction and KL terms produces calibrated predictive
//! intervals.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod tensor;
pub mod train;
pub mod variational;

pub use error::{KftError, Result};
pub use tensor::{Axis, DenseTensor};
