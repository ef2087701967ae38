//! Core library for studying language-guided multi-target backdoor attacks
//! on image classifiers, together with the defenses that try to remove them.
//!
//! The crate is generic over the floating-point scalar via [`scalar::Scalar`]
//! so that models can train in `f32` while numerical checks (gradient
//! verification, metric accumulation) run in `f64`. The [`Real`] alias picks
//! the default precision used by the binaries and most tests.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod defense;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod instructions;
pub mod nn;
pub mod plot;
pub mod poison;
pub mod projection;
pub mod report;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod trigger;
pub mod victim;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Default training precision.
pub type Real = f32;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
