//! Numeric foundation: dense matrices, reverse-mode autodiff, Adam, and a
//! finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod mat;
pub mod tape;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use mat::Mat;
pub(crate) use mat::softmax_rows_into;
pub use tape::{Gradients, Tape, Var};

/// `exp` that works without `std` (routes through libm there).
#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.exp()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::exp(x)
    }
}

/// `ln` that works without `std`.
#[inline]
pub(crate) fn ln(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.ln()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::log(x)
    }
}

/// `round` (half away from zero) that works without `std`.
#[inline]
pub(crate) fn round(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.round()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::round(x)
    }
}

/// `sqrt` that works without `std`.
#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.sqrt()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::sqrt(x)
    }
}
