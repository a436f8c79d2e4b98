//! Rigid-body rotational dynamics with three principal-axis reaction wheels.
//!
//! Sign convention: a positive body torque `τ` on axis `i` is produced by
//! decelerating wheel `i`, so `ω̇_rw = −τ / I_rw`. Total angular momentum
//! `Iω + I_rw·rw` is exchanged between body and wheels, never created.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attitude::{AxisAngle, Quaternion, Vec3};

/// Per-axis limit applied to commanded torques, N·m (half the wheel capability).
pub const TORQUE_LIMIT: f64 = 0.002;

pub const RAD_S_PER_RPM: f64 = std::f64::consts::PI / 30.0;

pub fn rpm_to_rad_s(rpm: f64) -> f64 {
    rpm * RAD_S_PER_RPM
}

pub fn rad_s_to_rpm(w: f64) -> f64 {
    w / RAD_S_PER_RPM
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("non-finite state after integration (omega = {omega:?}, rw = {rw:?})")]
    NonFinite { omega: [f64; 3], rw: [f64; 3] },
    #[error("invalid satellite parameter `{0}`")]
    InvalidParam(&'static str),
    #[error("invalid step: {0}")]
    InvalidStep(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SatelliteParams {
    /// Principal moments of inertia, kg·m².
    pub inertia: Vec3,
    /// Per-wheel spin inertia, kg·m².
    pub rw_inertia: f64,
    /// Hardware torque capability of one wheel, N·m.
    pub max_rw_torque: f64,
    /// Wheel speed limit, rad/s.
    pub rw_saturation_speed: f64,
    /// Include the `ω × h_rw` wheel coupling term. When off, the body obeys
    /// the bare rigid-body equations `I ω̇ = M − ω × Iω`.
    pub gyroscopic_coupling: bool,
}

impl Default for SatelliteParams {
    fn default() -> Self {
        Self {
            inertia: Vec3::new(0.19, 0.23, 0.17),
            rw_inertia: 1.82e-5,
            max_rw_torque: 0.004,
            rw_saturation_speed: rpm_to_rad_s(7000.0),
            gyroscopic_coupling: true,
        }
    }
}

impl SatelliteParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let i = self.inertia;
        if !(i.x > 0.0 && i.y > 0.0 && i.z > 0.0 && i.is_finite()) {
            return Err(DynamicsError::InvalidParam("inertia"));
        }
        if !(self.rw_inertia > 0.0 && self.rw_inertia.is_finite()) {
            return Err(DynamicsError::InvalidParam("rw_inertia"));
        }
        if !(self.max_rw_torque > 0.0 && self.max_rw_torque.is_finite()) {
            return Err(DynamicsError::InvalidParam("max_rw_torque"));
        }
        if !(self.rw_saturation_speed > 0.0 && self.rw_saturation_speed.is_finite()) {
            return Err(DynamicsError::InvalidParam("rw_saturation_speed"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SatelliteState {
    pub attitude: Quaternion,
    /// Body rates, rad/s.
    pub omega: Vec3,
    /// Wheel speeds, rad/s, one wheel per principal axis.
    pub rw_speed: Vec3,
}

impl SatelliteState {
    pub fn at_rest(attitude: Quaternion) -> Self {
        Self { attitude, omega: Vec3::ZERO, rw_speed: Vec3::ZERO }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureMode {
    #[default]
    #[serde(rename = "none", alias = "nominal")]
    Nominal,
    #[serde(rename = "x")]
    FailedX,
    #[serde(rename = "y")]
    FailedY,
    #[serde(rename = "z")]
    FailedZ,
}

impl FailureMode {
    pub const ALL_FAILED: [FailureMode; 3] = [FailureMode::FailedX, FailureMode::FailedY, FailureMode::FailedZ];

    pub fn failed_axis(self) -> Option<usize> {
        match self {
            FailureMode::Nominal => None,
            FailureMode::FailedX => Some(0),
            FailureMode::FailedY => Some(1),
            FailureMode::FailedZ => Some(2),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            FailureMode::Nominal => "none",
            FailureMode::FailedX => "x",
            FailureMode::FailedY => "y",
            FailureMode::FailedZ => "z",
        }
    }
}

impl fmt::Display for FailureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for FailureMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "nominal" => Ok(FailureMode::Nominal),
            "x" => Ok(FailureMode::FailedX),
            "y" => Ok(FailureMode::FailedY),
            "z" => Ok(FailureMode::FailedZ),
            other => Err(format!("unknown failure mode `{other}` (expected none, x, y or z)")),
        }
    }
}

/// Body-frame torque request, already limited to `±TORQUE_LIMIT` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TorqueCommand(Vec3);

impl TorqueCommand {
    pub const ZERO: TorqueCommand = TorqueCommand(Vec3::ZERO);

    pub fn tau(&self) -> Vec3 {
        self.0
    }
}

pub fn clamp_torque(raw: Vec3) -> TorqueCommand {
    TorqueCommand(raw.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-TORQUE_LIMIT, TORQUE_LIMIT) }))
}

pub fn apply_failure(cmd: TorqueCommand, mode: FailureMode) -> TorqueCommand {
    let mut t = cmd.0.to_array();
    if let Some(axis) = mode.failed_axis() {
        t[axis] = 0.0;
    }
    TorqueCommand(t.into())
}

/// Zeroes torque on axes whose wheel sits at saturation when the reaction
/// would drive it further out. Desaturating torque passes through.
pub fn effective_wheel_torque(cmd: TorqueCommand, state: &SatelliteState, params: &SatelliteParams) -> Vec3 {
    let sat = params.rw_saturation_speed;
    let mut out = cmd.0.to_array();
    for (i, t) in out.iter_mut().enumerate() {
        let rw = state.rw_speed[i];
        // wheel acceleration is −τ / I_rw
        if (rw >= sat && *t < 0.0) || (rw <= -sat && *t > 0.0) {
            *t = 0.0;
        }
    }
    out.into()
}

/// Rigid-body Euler equations, `ω̇ = I⁻¹ (M − ω × Iω)`, diagonal inertia.
pub fn euler_dynamics(params: &SatelliteParams, omega: Vec3, torque: Vec3) -> Vec3 {
    let h = params.inertia.hadamard(omega);
    (torque - omega.cross(h)).div_elem(params.inertia)
}

/// Euler equations including stored wheel momentum,
/// `ω̇ = I⁻¹ (M − ω × (Iω + I_rw·rw))`.
pub fn euler_dynamics_with_wheels(params: &SatelliteParams, omega: Vec3, torque: Vec3, rw_speed: Vec3) -> Vec3 {
    let h = params.inertia.hadamard(omega) + rw_speed * params.rw_inertia;
    (torque - omega.cross(h)).div_elem(params.inertia)
}

/// Body-frame total angular momentum `Iω + I_rw·rw`, kg·m²/s.
pub fn total_angular_momentum(state: &SatelliteState, params: &SatelliteParams) -> Vec3 {
    params.inertia.hadamard(state.omega) + state.rw_speed * params.rw_inertia
}

/// Result of one integrated control interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub state: SatelliteState,
    /// Body torque actually delivered by the wheels, averaged over the interval.
    pub mean_torque: Vec3,
}

/// Integrates one interval of `dt` seconds in `substeps` equal substeps
/// with the command held constant.
pub fn step_dynamics(
    state: &SatelliteState,
    cmd: TorqueCommand,
    dt: f64,
    params: &SatelliteParams,
    mode: FailureMode,
    substeps: usize,
) -> Result<SatelliteState, DynamicsError> {
    integrate(state, cmd, dt, params, mode, substeps).map(|r| r.state)
}

pub fn integrate(
    state: &SatelliteState,
    cmd: TorqueCommand,
    dt: f64,
    params: &SatelliteParams,
    mode: FailureMode,
    substeps: usize,
) -> Result<StepReport, DynamicsError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::InvalidStep("dt must be positive"));
    }
    if substeps == 0 {
        return Err(DynamicsError::InvalidStep("substeps must be at least 1"));
    }
    let cmd = apply_failure(cmd, mode);
    let h = dt / substeps as f64;
    let sat = params.rw_saturation_speed;
    let mut s = *state;
    let mut torque_sum = Vec3::ZERO;

    for _ in 0..substeps {
        let tau = effective_wheel_torque(cmd, &s, params);
        let rw_next = (s.rw_speed - tau * (h / params.rw_inertia)).map(|v| v.clamp(-sat, sat));
        // reaction actually delivered once the wheel clamp is accounted for
        let tau_applied = (s.rw_speed - rw_next) * (params.rw_inertia / h);

        let (omega_next, turn) = if params.gyroscopic_coupling {
            // Body-frame momentum rotates as Ḣ = −ω × H. The attitude and the
            // momentum share one exact rotation at the midpoint rate, so the
            // inertial momentum is preserved to rounding.
            let momentum = total_angular_momentum(&s, params);
            let wheels = rw_next * params.rw_inertia;
            let body_rate = |turn: &Quaternion| (turn.conjugate().rotate_vector(momentum) - wheels).div_elem(params.inertia);
            let predicted = body_rate(&rotation_over(s.omega, h, &s)?);
            let turn = rotation_over((s.omega + predicted) * 0.5, h, &s)?;
            (body_rate(&turn), turn)
        } else {
            let next = s.omega + euler_dynamics(params, s.omega, tau_applied) * h;
            (next, rotation_over((s.omega + next) * 0.5, h, &s)?)
        };

        s.attitude = s.attitude.compose(&turn);
        s.omega = omega_next;
        s.rw_speed = rw_next;
        torque_sum += tau_applied;

        if !(s.omega.is_finite() && s.rw_speed.is_finite()) {
            return Err(non_finite(&s));
        }
    }

    Ok(StepReport { state: s, mean_torque: torque_sum * (1.0 / substeps as f64) })
}

/// Body-frame rotation swept by a constant rate `w` over `h` seconds.
fn rotation_over(w: Vec3, h: f64, s: &SatelliteState) -> Result<Quaternion, DynamicsError> {
    let rate = w.norm();
    if rate == 0.0 {
        return Ok(Quaternion::IDENTITY);
    }
    AxisAngle::new(w * (1.0 / rate), rate * h).map(|aa| Quaternion::from_axis_angle(&aa)).map_err(|_| non_finite(s))
}

fn non_finite(s: &SatelliteState) -> DynamicsError {
    DynamicsError::NonFinite { omega: s.omega.to_array(), rw: s.rw_speed.to_array() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SatelliteParams {
        SatelliteParams::default()
    }

    #[test]
    fn default_params_match_reference_platform() {
        let p = params();
        assert_eq!(p.inertia, Vec3::new(0.19, 0.23, 0.17));
        assert_eq!(p.rw_inertia, 1.82e-5);
        assert_eq!(p.max_rw_torque, 0.004);
        assert!((p.rw_saturation_speed - 733.0383).abs() < 1e-4);
        assert!(p.validate().is_ok());
        let bad = SatelliteParams { rw_inertia: 0.0, ..p };
        assert_eq!(bad.validate(), Err(DynamicsError::InvalidParam("rw_inertia")));
    }

    #[test]
    fn euler_examples() {
        let p = params();
        let a = euler_dynamics(&p, Vec3::ZERO, Vec3::new(0.002, 0.0, 0.0));
        assert!((a.x - 0.002 / 0.19).abs() < 1e-12 && a.y == 0.0 && a.z == 0.0);
        assert!((a.x - 0.0105263).abs() < 1e-7);

        let a = euler_dynamics(&p, Vec3::new(0.1, 0.0, 0.1), Vec3::ZERO);
        // ω × Iω = (0, 0.1·0.019 − 0.1·0.017, 0) = (0, 0.0002, 0)
        assert!(a.x.abs() < 1e-12 && a.z.abs() < 1e-12);
        assert!((a.y - (-0.0002 / 0.23)).abs() < 1e-12);
        assert!((a.y - (-8.6957e-4)).abs() < 1e-8);

        for w in [Vec3::new(0.3, 0.0, 0.0), Vec3::new(0.0, -0.2, 0.0), Vec3::new(0.0, 0.0, 0.05)] {
            assert_eq!(euler_dynamics(&p, w, Vec3::ZERO), Vec3::ZERO);
        }
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_torque(Vec3::new(0.003, 0.0, 0.0)).tau(), Vec3::new(0.002, 0.0, 0.0));
        let inside = Vec3::new(0.001, -0.0015, 0.002);
        assert_eq!(clamp_torque(inside).tau(), inside);
        assert_eq!(clamp_torque(Vec3::new(-0.01, 0.01, 0.0)).tau(), Vec3::new(-0.002, 0.002, 0.0));
    }

    #[test]
    fn failure_examples() {
        let cmd = clamp_torque(Vec3::new(0.002, 0.001, 0.0));
        assert_eq!(apply_failure(cmd, FailureMode::Nominal), cmd);
        assert_eq!(apply_failure(cmd, FailureMode::FailedX).tau(), Vec3::new(0.0, 0.001, 0.0));
        let z = clamp_torque(Vec3::new(0.0, 0.0, 0.002));
        assert_eq!(apply_failure(z, FailureMode::FailedZ).tau(), Vec3::ZERO);
    }

    #[test]
    fn saturation_examples() {
        let p = params();
        let cmd = clamp_torque(Vec3::new(-0.001, 0.001, 0.002));
        let rest = SatelliteState::default();
        assert_eq!(effective_wheel_torque(cmd, &rest, &p), cmd.tau());

        let sat = p.rw_saturation_speed;
        let saturated = SatelliteState { rw_speed: Vec3::new(sat, sat, 0.0), ..rest };
        // negative body torque accelerates a positively spinning wheel: blocked
        let t = effective_wheel_torque(cmd, &saturated, &p);
        assert_eq!(t, Vec3::new(0.0, 0.001, 0.002));
    }

    #[test]
    fn equilibrium_is_preserved() {
        let p = params();
        let s = SatelliteState::at_rest(Quaternion::normalize(0.3, 0.2, -0.5, 0.1).unwrap());
        let next = step_dynamics(&s, TorqueCommand::ZERO, 0.5, &p, FailureMode::Nominal, 100).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn constant_torque_closed_form() {
        let p = params();
        let cmd = clamp_torque(Vec3::new(0.002, 0.0, 0.0));
        let next = step_dynamics(&SatelliteState::default(), cmd, 0.5, &p, FailureMode::Nominal, 100).unwrap();
        assert!((next.omega.x - 0.5 * 0.002 / 0.19).abs() < 1e-6);
        assert!((next.rw_speed.x - (-0.5 * 0.002 / 1.82e-5)).abs() < 1e-6);
        assert!((next.omega.x - 0.0052632).abs() < 1e-7);
        assert!((next.rw_speed.x + 54.945).abs() < 1e-3);
        // attitude: θ = ½ α t²
        let theta = 0.5 * (0.002 / 0.19) * 0.25;
        assert!((next.attitude.angular_distance(&Quaternion::IDENTITY) - theta).abs() < 1e-9);
    }

    #[test]
    fn axis_aligned_momentum_is_conserved() {
        let p = params();
        let s = SatelliteState {
            attitude: Quaternion::IDENTITY,
            omega: Vec3::new(0.0, 0.02, 0.0),
            rw_speed: Vec3::new(0.0, 12.0, 0.0),
        };
        let before = total_angular_momentum(&s, &p);
        let next = step_dynamics(&s, clamp_torque(Vec3::new(0.0, -0.0013, 0.0)), 0.5, &p, FailureMode::Nominal, 100)
            .unwrap();
        let after = total_angular_momentum(&next, &p);
        assert!((after.y - before.y).abs() <= 1e-12 * before.y.abs());
    }

    #[test]
    fn momentum_examples() {
        let p = params();
        assert_eq!(total_angular_momentum(&SatelliteState::default(), &p), Vec3::ZERO);
        let s = SatelliteState { omega: Vec3::new(0.01, 0.0, 0.0), ..Default::default() };
        assert!((total_angular_momentum(&s, &p).x - 0.0019).abs() < 1e-15);
    }

    #[test]
    fn single_axis_maneuver_from_rest_keeps_zero_momentum() {
        let p = params();
        let mut s = SatelliteState::default();
        for k in 0..400 {
            let u = if k < 100 { 0.002 } else if k < 200 { -0.0017 } else { 0.0004 * ((k as f64) * 0.1).sin() };
            s = step_dynamics(&s, clamp_torque(Vec3::new(0.0, 0.0, u)), 0.5, &p, FailureMode::Nominal, 100).unwrap();
            assert!(total_angular_momentum(&s, &p).max_abs() <= 1e-10);
        }
    }

    #[test]
    fn wheel_speeds_stay_within_saturation() {
        let p = params();
        let mut s = SatelliteState::default();
        let cmd = clamp_torque(Vec3::new(0.002, -0.002, 0.002));
        for _ in 0..300 {
            s = step_dynamics(&s, cmd, 0.5, &p, FailureMode::Nominal, 100).unwrap();
            assert!(s.rw_speed.max_abs() <= p.rw_saturation_speed);
        }
        assert_eq!(s.rw_speed.max_abs(), p.rw_saturation_speed);
        // momentum is still exchanged, not created
        assert!(total_angular_momentum(&s, &p).max_abs() < 1e-12);
    }

    #[test]
    fn failed_axis_receives_no_torque() {
        let p = params();
        let mut s = SatelliteState::default();
        for k in 0..50 {
            let cmd = clamp_torque(Vec3::new(0.002, 0.001 * (k as f64).cos(), -0.002));
            let r = integrate(&s, cmd, 0.5, &p, FailureMode::FailedX, 100).unwrap();
            assert_eq!(r.mean_torque.x, 0.0);
            assert_eq!(r.state.rw_speed.x, 0.0);
            s = r.state;
        }
    }

    #[test]
    fn principal_spin_turns_attitude_about_the_body_axis() {
        let p = params();
        let s = SatelliteState { omega: Vec3::new(0.0, 0.0, 0.1), ..Default::default() };
        let next = step_dynamics(&s, TorqueCommand::ZERO, 10.0, &p, FailureMode::Nominal, 100).unwrap();
        let expected = Quaternion::from_axis_angle(&AxisAngle::new(Vec3::Z, 1.0).unwrap());
        assert!(next.attitude.angular_distance(&expected) < 1e-12);
    }

    #[test]
    fn inertial_momentum_is_conserved_while_tumbling() {
        let p = params();
        let mut s = SatelliteState {
            attitude: Quaternion::normalize(0.8, 0.3, -0.4, 0.2).unwrap(),
            omega: Vec3::new(0.04, -0.06, 0.05),
            rw_speed: Vec3::new(-100.0, 300.0, 50.0),
        };
        let inertial = |s: &SatelliteState| s.attitude.rotate_vector(total_angular_momentum(s, &p));
        let h0 = inertial(&s);
        for k in 0..200 {
            let u = 0.002 * (k as f64 * 0.37).sin();
            s = step_dynamics(&s, clamp_torque(Vec3::new(u, -u, 0.5 * u)), 0.5, &p, FailureMode::Nominal, 50).unwrap();
            assert!((inertial(&s) - h0).norm() <= 1e-12 * h0.norm());
        }
    }

    #[test]
    fn substep_refinement_converges() {
        let p = params();
        let s = SatelliteState {
            attitude: Quaternion::normalize(0.8, 0.3, -0.4, 0.2).unwrap(),
            omega: Vec3::new(0.04, -0.06, 0.05),
            rw_speed: Vec3::new(-100.0, 300.0, 50.0),
        };
        for cmd in [TorqueCommand::ZERO, clamp_torque(Vec3::new(0.002, -0.001, 0.0015))] {
            let coarse = step_dynamics(&s, cmd, 0.5, &p, FailureMode::Nominal, 100).unwrap();
            let fine = step_dynamics(&s, cmd, 0.5, &p, FailureMode::Nominal, 10_000).unwrap();
            assert!(coarse.attitude.angular_distance(&fine.attitude) <= 1e-6);
        }
    }

    #[test]
    fn non_finite_state_is_reported() {
        let p = params();
        let s = SatelliteState { omega: Vec3::new(f64::INFINITY, 0.0, 0.0), ..Default::default() };
        let r = step_dynamics(&s, TorqueCommand::ZERO, 0.5, &p, FailureMode::Nominal, 10);
        assert!(matches!(r, Err(DynamicsError::NonFinite { .. })));
        assert!(matches!(
            step_dynamics(&SatelliteState::default(), TorqueCommand::ZERO, 0.5, &p, FailureMode::Nominal, 0),
            Err(DynamicsError::InvalidStep(_))
        ));
    }
}
