use std::fmt::Debug;

use num_traits::{Float, NumAssign};

/// Element type of the autograd engine.
///
/// Training runs in `f32`; the finite-difference reference path re-evaluates
/// the same graph in `f64`.
pub trait Scalar:
    Float + NumAssign + Debug + Default + Send + Sync + std::iter::Sum + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
