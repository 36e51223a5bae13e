//! Scalar abstraction shared by all numeric code in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar the attention, clustering and localization math is
/// written against. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Cosine similarity with the zero-norm convention: any zero vector yields 0.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if na <= T::zero() || nb <= T::zero() {
        return T::zero();
    }
    let c = dot / (na.sqrt() * nb.sqrt());
    // rounding can push |c| a hair past 1
    c.max(-T::one()).min(T::one())
}

/// Numerically stable softmax, in place.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_zero_norm_is_zero() {
        assert_eq!(cosine(&[0.0f64, 0.0], &[1.0, 2.0]), 0.0);
        assert_eq!(cosine(&[1.0f32, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn cosine_self_is_one() {
        let v = [0.3f64, -1.2, 4.0];
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut r = [1.0f32, 2.0, 3.0, -50.0];
        softmax_in_place(&mut r);
        let s: f32 = r.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(r[2] > r[1] && r[1] > r[0]);
    }
}
