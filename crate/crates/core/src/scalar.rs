//! Scalar abstraction for the numerical core.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar used throughout the math modules: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Default + std::fmt::Debug + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for literals and configuration values.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Real")
    }

    fn pi() -> Self {
        Self::of(std::f64::consts::PI)
    }

    fn two_pi() -> Self {
        Self::of(std::f64::consts::TAU)
    }

    fn half() -> Self {
        Self::of(0.5)
    }

    fn two() -> Self {
        Self::of(2.0)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Normalizes an angle to the half-open interval `(-pi, pi]`.
pub fn normalize_angle<R: Real>(a: R) -> R {
    if !a.is_finite() {
        return a;
    }
    let tau = R::two_pi();
    let mut r = a % tau;
    if r > R::pi() {
        r -= tau;
    } else if r <= -R::pi() {
        r += tau;
    }
    r
}

/// Shortest signed difference `a - b` between two angles, in `(-pi, pi]`.
pub fn angle_diff<R: Real>(a: R, b: R) -> R {
    normalize_angle(a - b)
}
