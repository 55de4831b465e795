//! Generic floating-point scalar used throughout the crate.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point scalar: f32 or f64.
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
    /// Shorthand for `from_f64(..).unwrap()`.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    /// Shorthand for integer literals.
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("to_f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Deterministic pairwise tree sum with a fixed chunk size.
///
/// The reduction order depends only on the slice length, so results are
/// bit-identical run to run regardless of how the values were produced.
pub fn tree_sum<F: Scalar>(values: &[F]) -> F {
    const CHUNK: usize = 64;
    fn reduce<F: Scalar>(v: &[F]) -> F {
        if v.len() <= CHUNK {
            let mut acc = F::zero();
            for &x in v {
                acc += x;
            }
            acc
        } else {
            let mid = v.len() / 2;
            reduce(&v[..mid]) + reduce(&v[mid..])
        }
    }
    if values.is_empty() {
        F::zero()
    } else {
        reduce(values)
    }
}

/// Tree sum over an indexed map without materialising the intermediate vector
/// in the caller.
pub fn tree_sum_by<F: Scalar>(n: usize, f: impl Fn(usize) -> F) -> F {
    let values: Vec<F> = (0..n).map(f).collect();
    tree_sum(&values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_sum_matches_naive_on_uniform_values() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = v.iter().sum();
        assert!((tree_sum(&v) - naive).abs() < 1e-12);
    }

    #[test]
    fn tree_sum_empty_is_zero() {
        assert_eq!(tree_sum::<f64>(&[]), 0.0);
    }
}
