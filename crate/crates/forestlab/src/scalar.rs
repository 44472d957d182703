//! Scalar abstraction for the numeric core.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::num::ParseFloatError;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the trees and ensembles are generic over.
///
/// Impurity bookkeeping and aggregate statistics are accumulated in `f64`
/// internally; this trait is about the storage and prediction type.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + FromStr<Err = ParseFloatError>
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_real(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("value representable in scalar type")
    }

    fn to_real(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
