//! Numeric substrate for the mmrank pipeline: dense tensors, a reverse-mode
//! gradient tape, named parameter storage with Adam, finite-difference
//! gradient checking, and deterministic RNG streams.
//!
//! Everything is generic over the scalar element ([`Scalar`], implemented
//! for `f32` and `f64`); the aliases below pin the double-precision
//! instantiation the pipeline uses.

pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::NumericsError;
pub use scalar::Scalar;

/// Element type used by the training pipeline.
pub type Real = f64;
pub type Tensor = tensor::Tensor<Real>;
pub type Tape = tape::Tape<Real>;
pub type Gradients = tape::Gradients<Real>;
pub type ParamStore = params::ParamStore<Real>;
pub type GradBuf = params::GradBuf<Real>;
pub type Adam = params::Adam<Real>;
pub use tape::NodeId;
