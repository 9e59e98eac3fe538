//! Discrete-time simulator and optimization library for cooperative vehicle
//! control at a signal-free multi-entry roundabout.
//!
//! The crate is organized around a per-tick control loop:
//!
//! * [`geometry`] — roundabout layout, routes, and merge-point projections
//! * [`dynamics`] — kinematic bicycle model and its Jacobian linearization
//! * [`comms`] — simulated V2X links with stochastic delivery delay,
//!   state prediction and fusion
//! * [`traffic`] — arrivals, time-to-collision, neighbor identification,
//!   and human-driver behavior
//! * [`dmpc`] — per-vehicle distributed model predictive control
//! * [`sequencer`] — per-merge-point entry sequencing by branch-and-bound
//! * [`metrics`] — travel time, energy, objective, PET and conflict metrics
//! * [`engine`] — the tick loop tying everything together
//! * [`config`] — scenario configuration, presets, and serialization
//!
//! The numerical core is generic over the scalar type through [`Real`];
//! the engine and configuration layers instantiate everything at `f64`.

pub mod comms;
pub mod config;
pub mod dmpc;
pub mod dynamics;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod scalar;
pub mod sequencer;
pub mod traffic;

pub use error::SimError;
pub use scalar::Real;

/// Scalar type used by the engine, configuration, and report pipeline.
pub type Scalar = f64;

/// Roundabout layout instantiated at the engine scalar.
pub type Layout = geometry::RoundaboutLayout<Scalar>;
/// Vehicle state instantiated at the engine scalar.
pub type Vehicle = dynamics::VehicleState<Scalar>;
/// Control input instantiated at the engine scalar.
pub type Control = dynamics::ControlInput<Scalar>;
/// Solved control plan instantiated at the engine scalar.
pub type Plan = dmpc::ControlPlan<Scalar>;
