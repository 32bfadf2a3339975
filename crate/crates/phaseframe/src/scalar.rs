//! Floating-point abstraction shared by the DSP and NN layers.
//!
//! Everything numeric is generic over [`Real`] so the same code runs in
//! single precision (training, production inference) and double precision
//! (oracle and finite-difference tests).

use num_traits::Float;
use rustfft::FftNum;

/// Scalar type the pipelines compute in. Implemented for `f32` and `f64`.
pub trait Real: Float + FftNum + Default + std::fmt::Display + std::iter::Sum {}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for converting an `f64` constant into `T`.
#[inline(always)]
pub fn rl<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("constant representable in any Real")
}
