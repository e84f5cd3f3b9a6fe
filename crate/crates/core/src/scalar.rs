//! Floating-point abstraction shared by every solver in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use nalgebra::RealField;
use num_traits::FromPrimitive;

/// Real scalar the numerical kernels are generic over.
///
/// Implemented for `f32` and `f64`. Method calls (`sqrt`, `exp`, `abs`, ...)
/// resolve through [`nalgebra::ComplexField`]/[`RealField`], which keeps the
/// dense linear algebra and the transport sweeps on one trait bound.
pub trait Real: RealField + Copy + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static {
    /// Converts an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    /// Converts a count or index.
    #[inline]
    fn of(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable in scalar type")
    }

    /// Lossy conversion back to `f64` for reporting.
    fn as_f64(self) -> f64;

    /// Relative residual used by iterative solvers when the caller gives none.
    ///
    /// `1e-10` in double precision, clamped above a few hundred ulps so that
    /// single-precision solves can terminate.
    fn solve_tolerance() -> Self {
        let floor = Self::default_epsilon() * Self::lit(1000.0);
        let target = Self::lit(1e-10);
        if floor > target {
            floor
        } else {
            target
        }
    }
}

impl Real for f32 {
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Planar vector; slab quantities keep the second component at zero.
pub type Vec2<S> = [S; 2];

#[inline]
pub(crate) fn dot<S: Real>(a: Vec2<S>, b: Vec2<S>) -> S {
    a[0] * b[0] + a[1] * b[1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_depends_on_precision() {
        assert_eq!(f64::solve_tolerance(), 1e-10);
        let t32 = f32::solve_tolerance();
        assert!(t32 > 1e-5 && t32 < 1e-3);
    }
}
