//! Floating-point scalar abstraction shared by every numerical module.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the lab is generic over: `f32` or `f64`.
///
/// Tolerances that the numerical contracts pin for `f64` are exposed as
/// methods so that single precision gets thresholds it can actually meet.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + LowerExp + Default + Send + Sync + 'static
{
    /// Tolerance used when verifying structural flags (symmetry, stochasticity).
    fn flag_tol() -> Self;

    /// Relative tolerance used by the Jacobi eigensolver's stopping rule.
    fn eig_tol() -> Self;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }
}

impl Scalar for f64 {
    fn flag_tol() -> Self {
        1e-12
    }

    fn eig_tol() -> Self {
        1e-12
    }
}

impl Scalar for f32 {
    fn flag_tol() -> Self {
        1e-5
    }

    fn eig_tol() -> Self {
        1e-6
    }
}
