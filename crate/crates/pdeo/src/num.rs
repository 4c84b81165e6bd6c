//! Scalar abstraction for the math kernels.

/// Floating-point scalar: f32 or f64.
pub trait Real: num_traits::Float + num_traits::FromPrimitive + std::fmt::Debug + 'static {
    /// Lift an f64 constant into the scalar type.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("constant conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}
