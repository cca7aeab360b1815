//! Numerical toolkit for one-dimensional generalized Mott variable-range hopping.
//!
//! The crate samples marked renewal point processes, simulates the long-range
//! hopping walk and its nearest-neighbor reduction, estimates diffusion
//! coefficients by Monte Carlo, finite-volume variational solves and explicit
//! formulas, and computes spectral gaps and Cheeger constants of finite boxes.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod asymptotics;
pub mod diffusion;
pub mod error;
pub mod linalg;
pub mod par;
pub mod pointproc;
pub mod rates;
pub mod seed;
pub mod spectral;
pub mod stats;
pub mod walker;

pub use error::{HopError, Result};
