//! Floating point abstraction shared by the scoring code.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar used by relevance scoring, embeddings and the spawn policy.
///
/// Implemented for `f32` and `f64`. Wire formats and reports always use
/// `f64`; the `f32` instantiation is for callers that keep large embedding
/// stores in memory.
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
    /// Converts from `f64`, panicking only on values the type cannot hold at all.
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("f64 literal representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance used when checking that weight vectors sum to one.
    fn weight_tolerance() -> Self;
}

impl Scalar for f32 {
    fn weight_tolerance() -> Self {
        1e-6
    }
}

impl Scalar for f64 {
    fn weight_tolerance() -> Self {
        1e-9
    }
}

/// Clamps `value` into `[0, 1]`; NaN maps to zero.
pub fn clamp_unit<S: Scalar>(value: S) -> S {
    if value.is_nan() {
        S::zero()
    } else {
        value.max(S::zero()).min(S::one())
    }
}
