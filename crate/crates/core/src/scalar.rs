//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type of tensors: `f32` for training runs, `f64`
/// for gradient checks and oracles.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Short dtype name used in reports.
    const NAME: &'static str;

    /// Converts an `f64` literal, rounding to the nearest representable value.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every float type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f32().expect("float converts to f32")
    }

    #[inline]
    fn from_f32(x: f32) -> Self {
        Self::lit(f64::from(x))
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus<S: Scalar>(x: S) -> S {
    if x > S::lit(20.0) {
        x
    } else if x < S::lit(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function.
#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_matches_direct_formula_in_safe_range() {
        for &x in &[-5.0f64, -1.0, 0.0, 0.5, 3.0, 10.0] {
            let direct = (1.0 + x.exp()).ln();
            assert!((softplus(x) - direct).abs() < 1e-14);
        }
        assert_eq!(softplus(50.0f64), 50.0);
    }

    #[test]
    fn sigmoid_is_symmetric() {
        for &x in &[-30.0f64, -2.0, 0.0, 1.5, 30.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }
}
