//! Numeric traits the library is generic over.
//!
//! Cooperative-game arithmetic only needs a field ([`Scalar`]), so it runs
//! over `f32`, `f64` and exact rationals alike. Everything that takes
//! logarithms or exponentials (policies, objectives) needs [`Real`].

use std::fmt::{Debug, Display};

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, NumAssign, NumCast, ToPrimitive};

/// Field-like scalar: coalition values, Shapley credits, rewards.
pub trait Scalar: NumAssign + Clone + PartialOrd + Debug + FromPrimitive + ToPrimitive + Send + Sync + 'static {
    /// Absolute value, defined for every scalar (rationals included).
    fn magnitude(&self) -> Self {
        if *self < Self::zero() {
            Self::zero() - self.clone()
        } else {
            self.clone()
        }
    }

    /// Lossy view used for reporting and tolerance checks.
    fn as_f64(&self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
impl Scalar for Ratio<i64> {}
impl Scalar for Ratio<i128> {}

/// Floating-point scalar for policy and optimization code.
pub trait Real: Scalar + Float + NumCast + Display {
    /// Conversion from configuration values, which are always `f64`.
    fn lit(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 literal representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Exact rational used to check game-theoretic identities without rounding.
pub type Rational = Ratio<i128>;
