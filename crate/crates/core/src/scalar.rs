use std::fmt::{Debug, Display};

/// Floating-point element type accepted by every numeric routine.
///
/// Implemented for `f32` and `f64`. Training and checkpoints use `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssign
    + std::iter::Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Never fails for finite inputs.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Pairwise (tree) summation in index order.
///
/// The reduction order depends only on the slice length, so results are
/// reproducible regardless of how the inputs were produced.
pub fn tree_sum<S: Scalar>(xs: &[S]) -> S {
    match xs.len() {
        0 => S::zero(),
        1 => xs[0],
        2 => xs[0] + xs[1],
        n if n <= 8 => xs.iter().fold(S::zero(), |a, &b| a + b),
        n => {
            let mid = n / 2;
            tree_sum(&xs[..mid]) + tree_sum(&xs[mid..])
        }
    }
}
