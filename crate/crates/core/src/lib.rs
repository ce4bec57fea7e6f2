//! Vision-aided long-term mmWave beam tracking.
//!
//! The crate covers the full pipeline: a ULA/codebook channel model with an
//! exhaustive-search beam oracle ([`channel`]), a synthetic camera scene that
//! produces labeled image sequences ([`scene`]), frame-difference motion
//! masking ([`preprocess`]), a CNN + GRU + residual multi-head attention
//! predictor built on a small reverse-mode autodiff engine ([`tensor`],
//! [`model`]), focal-loss training ([`loss`], [`train`]) and Top-k / DBA
//! evaluation ([`metrics`]).
//!
//! Numerical code is generic over [`Scalar`] (`f32` and `f64`); the aliases
//! below name the common instantiations.

pub mod channel;
mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod scalar;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type ComplexVec64 = channel::ComplexVec<f64>;
pub type Codebook64 = channel::Codebook<f64>;
pub type Model32 = model::ModelParams<f32>;
pub type Model64 = model::ModelParams<f64>;
