//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Real scalar usable as tensor element: `f32` on the inference path, `f64`
/// for gradient checks and oracles.
///
/// Reductions widen to `f64` through [`Scalar::widen`] and narrow back with
/// [`Scalar::narrow`], so `f32` tensors accumulate dot products in 64 bits.
pub trait Scalar: Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static {
    /// Number of bytes in the on-disk representation used by this scalar.
    const BYTES: usize;

    fn widen(self) -> f64;

    fn narrow(v: f64) -> Self;

    /// Convenience constructor from a literal.
    #[inline]
    fn of(v: f64) -> Self {
        Self::narrow(v)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $bytes:expr) => {
        impl Scalar for $t {
            const BYTES: usize = $bytes;

            #[inline(always)]
            fn widen(self) -> f64 {
                self as f64
            }

            #[inline(always)]
            fn narrow(v: f64) -> Self {
                v as $t
            }
        }
    };
}

impl_scalar!(f32, 4);
impl_scalar!(f64, 8);
