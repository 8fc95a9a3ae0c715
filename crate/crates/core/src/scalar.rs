//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar the models are generic over. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// ln(2π)
    const LN_2PI: Self;

    /// Converts an `f64` literal. Every `Scalar` can represent (a rounding of) any finite `f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 literal")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize fits in a float")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {
    const LN_2PI: Self = 1.837_877_1;
}

impl Scalar for f64 {
    const LN_2PI: Self = 1.837_877_066_409_345_5;
}

/// Numerically stable `ln Σ exp(v_i)`.
///
/// Returns `-inf` when every entry is `-inf` (or the slice is empty).
pub fn log_sum_exp<T: Scalar>(values: &[T]) -> T {
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    if max == T::infinity() {
        return max;
    }
    let sum: T = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_2pi_constants() {
        // correctly rounded; the computed log is one ulp low
        assert!((f64::LN_2PI - (2.0 * std::f64::consts::PI).ln()).abs() <= 4.0 * f64::EPSILON);
        assert_eq!(f64::LN_2PI, 1.8378770664093456);
        assert!((f32::LN_2PI - (2.0 * std::f32::consts::PI).ln()).abs() < 1e-6);
    }

    #[test]
    fn log_sum_exp_edge_cases() {
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0f64, 0.0]) - 2f64.ln()).abs() < 1e-15);
        // would overflow in linear domain
        let v = log_sum_exp(&[1000.0f64, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let v = log_sum_exp(&[-1000.0f32, f32::NEG_INFINITY]);
        assert_eq!(v, -1000.0);
    }
}
