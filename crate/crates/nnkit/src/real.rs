use std::fmt::Debug;

use num_traits::Float;

/// Scalar type a [`Tape`](crate::Tape) can run on.
///
/// Training runs in `f32`; gradient checks run the same code in `f64`.
pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}
