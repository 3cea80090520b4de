use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};
use std::fmt::{Debug, Display};

/// Floating-point element type for tensors and the gradient tape.
///
/// The training pipeline pins this to `f64` (see the crate-root aliases);
/// the math itself only needs what `num_traits::Float` provides, so `f32`
/// works for callers that want the smaller footprint.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` literal into the active scalar type.
#[inline]
pub fn lit<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 literal representable in scalar type")
}
