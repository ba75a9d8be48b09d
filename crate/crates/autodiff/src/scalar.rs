//! Scalar abstraction for the tensor engine.
//!
//! All numeric kernels are generic over [`Scalar`], which extends
//! `num_traits::Float` with the error function (needed for the exact
//! Gaussian-CDF GeLU) and a few ergonomic conversions. `f32` and `f64`
//! are the two implementations; the pipeline instantiates at `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + Sum
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Error function, full precision for the type.
    fn erf(self) -> Self;

    /// Lossy conversion from an `f64` literal.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant not representable")
    }

    /// Lossless widening to `f64` for reporting and checks.
    fn to_f64c(self) -> f64;
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn to_f64c(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn to_f64c(self) -> f64 {
        self as f64
    }
}

/// Standard-normal pdf, used by the GeLU derivative chain.
pub(crate) fn normal_pdf<S: Scalar>(x: S) -> S {
    let inv_sqrt_2pi = S::c(0.398_942_280_401_432_7);
    (-(x * x) * S::c(0.5)).exp() * inv_sqrt_2pi
}

/// Standard-normal cdf via erf.
pub(crate) fn normal_cdf<S: Scalar>(x: S) -> S {
    let inv_sqrt_2 = S::c(std::f64::consts::FRAC_1_SQRT_2);
    S::c(0.5) * (S::one() + (x * inv_sqrt_2).erf())
}
