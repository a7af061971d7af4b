use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Scalar element type of the engine. Training runs in `f32`; gradient
/// verification runs the same code in `f64`.
pub trait Real: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}
