//! Multi-scale speaking-style modelling for expressive text-to-speech.
//!
//! The pipeline has three learned parts plus the data and evaluation
//! machinery around them:
//!
//! - [`extractor`] — reference encoders, residual style embeddings and
//!   style-token attention extracting style at global / sentence / subword
//!   level from ground-truth mel-spectrograms.
//! - [`predictor`] — semantic embeddings of the sentence window, a
//!   hierarchical context encoder and three conditioned heads predicting
//!   the same style embeddings from text alone.
//! - [`acoustic`] — a FastSpeech2-style backbone (phoneme encoder, style
//!   injection, variance adaptor, mel decoder).
//! - [`training`] — the three-stage schedule: level-wise extractor
//!   training, extractor→predictor distillation, joint fine-tuning.
//! - [`corpus`] / [`eval`] — feature extraction, context windows, a
//!   deterministic toy corpus, and DTW-based objective metrics.
//!
//! All numeric code is generic over the scalar type via [`num::Scalar`]
//! (`f32` for the production pipeline, `f64` where tests need the extra
//! precision); concrete aliases live at the crate root.

pub mod acoustic;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod nn;
pub mod num;
pub mod predictor;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Scalar type used by the production pipeline and the CLI.
pub type DefaultScalar = f32;

/// f32 autodiff tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// f64 autodiff tensor (used by precision-sensitive tests).
pub type Tensor64 = tensor::Tensor<f64>;
/// f32 parameter store.
pub type ParamStore32 = nn::ParamStore<f32>;
