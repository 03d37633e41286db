//! Floating-point scalar abstraction shared by the tensor kernel, the
//! autodiff tape and the DP mechanism.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable by every numeric routine in the crate.
///
/// Implemented for `f32` and `f64`. Accounting and checkpoint I/O always
/// go through `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`. Never fails for finite input.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Pairwise summation. Error grows as O(log n) instead of O(n), so
/// reordering the inputs changes the result only at rounding level.
pub fn pairwise_sum<S: Scalar>(xs: &[S]) -> S {
    const LEAF: usize = 16;
    if xs.len() <= LEAF {
        return xs.iter().copied().fold(S::zero(), |a, b| a + b);
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(pairwise_sum(&xs), 5050.0);
    }

    #[test]
    fn conversions_round_trip() {
        assert_eq!(f32::of(0.5).as_f64(), 0.5);
        assert_eq!(f64::of(1e-300), 1e-300);
    }
}
