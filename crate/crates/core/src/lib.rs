//! Reinforcement-learning workbench for small-satellite attitude control.
//!
//! The crate is organized bottom-up:
//!
//! - [`attitude`]: quaternion algebra and kinematic propagation
//! - [`dynamics`]: rigid body with three reaction wheels, torque limits,
//!   wheel saturation and per-axis failures
//! - [`env`]: the attitude-maneuver MDP (observation, reward, resets, delays)
//! - [`nn`]: actor-critic multilayer perceptron with hand-written backprop
//! - [`checkpoint`]: binary and JSON network files
//! - [`ppo`]: rollout collection, GAE, clipped-surrogate updates, multi-seed training
//! - [`eval`]: per-step envelopes, convergence statistics and CSV/JSON export
//! - [`harness`]: telemetry/command loop emulating hardware-in-the-loop tests
//! - [`config`]: run configuration and reproducibility manifests

pub mod attitude;
pub mod checkpoint;
pub mod config;
pub mod dynamics;
pub mod env;
pub mod eval;
pub mod harness;
pub mod nn;
pub mod ppo;
pub mod rng;

pub use attitude::{Quaternion, Vec3};
pub use dynamics::{FailureMode, SatelliteParams, SatelliteState};
pub use env::{AlignTarget, AttitudeEnv, TaskSpec};
