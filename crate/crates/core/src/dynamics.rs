//! Kinematic bicycle model with per-step Jacobian linearization.

use crate::error::{Result, SimError};
use crate::geometry::{PathPhase, RouteId};
use crate::linalg::{Mat4, Mat4x2};
use crate::scalar::{normalize_angle, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum VehicleCategory {
    Cav,
    Hdv,
}

impl std::fmt::Display for VehicleCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VehicleCategory::Cav => write!(f, "CAV"),
            VehicleCategory::Hdv => write!(f, "HDV"),
        }
    }
}

/// Kinematic state of one vehicle plus its identity and route.
#[derive(Debug, Clone, Copy)]
pub struct VehicleState<R> {
    pub id: u64,
    pub x: R,
    pub y: R,
    pub heading: R,
    pub speed: R,
    pub wheelbase: R,
    pub category: VehicleCategory,
    pub route: RouteId,
    /// Simulation time at which the vehicle entered the network, seconds.
    pub entered_at: R,
    pub phase: PathPhase,
}

impl<R: Real> VehicleState<R> {
    pub fn kinematic(&self) -> [R; 4] {
        [self.x, self.y, self.heading, self.speed]
    }

    pub fn with_kinematic(mut self, k: [R; 4]) -> Self {
        self.x = k[0];
        self.y = k[1];
        self.heading = k[2];
        self.speed = k[3];
        self
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite() && self.speed.is_finite()
    }
}

/// Acceleration and front-steering command pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInput<R> {
    pub accel: R,
    pub steer: R,
    /// Tick at which the command was issued.
    pub issued_at: u64,
}

impl<R: Real> ControlInput<R> {
    pub fn new(accel: R, steer: R, issued_at: u64) -> Self {
        Self {
            accel,
            steer,
            issued_at,
        }
    }

    pub fn zero() -> Self {
        Self::new(R::zero(), R::zero(), 0)
    }

    pub fn is_finite(&self) -> bool {
        self.accel.is_finite() && self.steer.is_finite()
    }

    pub fn clamped(&self, limits: &Limits<R>) -> Self {
        Self {
            accel: self.accel.max(-limits.accel_max).min(limits.accel_max),
            steer: self.steer.max(-limits.steer_max).min(limits.steer_max),
            issued_at: self.issued_at,
        }
    }
}

/// Speed and input bounds applied by the plant and the controller.
#[derive(Debug, Clone, Copy)]
pub struct Limits<R> {
    pub speed_min: R,
    pub speed_max: R,
    pub accel_max: R,
    pub steer_max: R,
}

impl<R: Real> Default for Limits<R> {
    fn default() -> Self {
        Self {
            speed_min: R::zero(),
            speed_max: R::of(20.0),
            accel_max: R::of(5.0),
            steer_max: R::of(0.6),
        }
    }
}

/// One discrete step of the bicycle model.
///
/// Position and heading advance with the current speed; speed integrates the
/// acceleration and is clamped to the limits afterwards; the heading is
/// normalized to `(-pi, pi]`.
pub fn step<R: Real>(
    state: &VehicleState<R>,
    input: &ControlInput<R>,
    dt: R,
    limits: &Limits<R>,
) -> Result<VehicleState<R>> {
    if !state.is_finite() || !input.is_finite() {
        return Err(SimError::NonFinite("vehicle step"));
    }
    if !(dt > R::zero()) {
        return Err(SimError::Domain("dt must be positive".into()));
    }
    let mut next = *state;
    next.x = state.x + dt * state.speed * state.heading.cos();
    next.y = state.y + dt * state.speed * state.heading.sin();
    next.heading = normalize_angle(state.heading + dt * state.speed / state.wheelbase * input.steer.tan());
    next.speed = (state.speed + dt * input.accel)
        .max(limits.speed_min)
        .min(limits.speed_max);
    Ok(next)
}

/// Unclamped raw update, used by the solver's internal model.
pub fn step_raw<R: Real>(k: [R; 4], u: [R; 2], wheelbase: R, dt: R) -> [R; 4] {
    [
        k[0] + dt * k[3] * k[2].cos(),
        k[1] + dt * k[3] * k[2].sin(),
        k[2] + dt * k[3] / wheelbase * u[1].tan(),
        k[3] + dt * u[0],
    ]
}

/// Jacobians of the raw step with respect to state and input.
pub fn linearize<R: Real>(
    state: &VehicleState<R>,
    input: &ControlInput<R>,
    dt: R,
) -> Result<(Mat4<R>, Mat4x2<R>)> {
    if !state.is_finite() || !input.is_finite() {
        return Err(SimError::NonFinite("linearization point"));
    }
    Ok(linearize_raw(
        state.kinematic(),
        [input.accel, input.steer],
        state.wheelbase,
        dt,
    ))
}

pub fn linearize_raw<R: Real>(k: [R; 4], u: [R; 2], wheelbase: R, dt: R) -> (Mat4<R>, Mat4x2<R>) {
    let z = R::zero();
    let one = R::one();
    let (sin_h, cos_h) = (k[2].sin(), k[2].cos());
    let cos_steer = u[1].cos();
    let f = [
        [one, z, -dt * k[3] * sin_h, dt * cos_h],
        [z, one, dt * k[3] * cos_h, dt * sin_h],
        [z, z, one, dt * u[1].tan() / wheelbase],
        [z, z, z, one],
    ];
    let g = [
        [z, z],
        [z, z],
        [z, dt * k[3] / (wheelbase * cos_steer * cos_steer)],
        [dt, z],
    ];
    (f, g)
}
