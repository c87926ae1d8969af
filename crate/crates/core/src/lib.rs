//! Hypothesis-selection reinforcement learning for a hybrid network/HMM recognizer.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acoustic_model;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod feedback;
pub mod matrix;
pub mod reinforce;
pub mod report;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// The 64-bit acoustic model used by the training pipeline.
pub type Model = acoustic_model::AcousticModel<f64>;
/// Single-precision model variant.
pub type ModelF32 = acoustic_model::AcousticModel<f32>;
