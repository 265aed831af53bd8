//! Desk-scale adversarial robustness laboratory.
//!
//! The crate provides a minimal reverse-mode autodiff engine, small
//! classifiers, ℓp threat-model geometry, gradient-based attacks,
//! Fisher-information smoothness machinery with a numerical verification
//! suite, seven training programs, and evaluation/reporting tools.

pub mod autodiff;
pub mod error;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
