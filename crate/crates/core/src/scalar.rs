//! Floating-point abstraction shared by every numeric module.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::str::FromStr;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the models, losses and generators are written against: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + FromStr
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoints so a file is only ever read back at its own precision.
    const NAME: &'static str;

    /// Converts an `f64` constant. Every finite `f64` is representable (possibly rounded).
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Lower clamp applied before every logarithm of a probability.
pub const LOG_EPS: f64 = 1e-12;

/// Natural log with the probability clamp applied.
#[inline]
pub(crate) fn clamped_ln<T: Scalar>(p: T) -> T {
    p.max(T::lit(LOG_EPS)).ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: impl IntoIterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_val = T::neg_infinity();
    for (i, v) in row.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}
