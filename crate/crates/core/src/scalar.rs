use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the numeric core is generic over: `f32` or `f64`.
pub trait Real: Float + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static {}

impl<T> Real for T where T: Float + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static {}

/// Converts an `f64` constant into `T`. Panics only if `T` cannot represent any
/// finite approximation, which cannot happen for the supported scalar types.
pub(crate) fn real<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("constant must convert to scalar type")
}
