use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type for parameters, features and losses.
///
/// Everything numeric in the crate is generic over this trait. `f64` is the
/// working precision for experiments; `f32` is supported for cheaper runs.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`. Panics only if the value is not
    /// representable at all, which cannot happen for finite inputs.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 value not representable in scalar type")
    }

    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("count not representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
