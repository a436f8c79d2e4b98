//! Attitude-maneuver MDP: observation assembly, action decoding, shaped
//! reward, initial-condition sampling with a curriculum, control-loop delays
//! and episode termination.
//!
//! The pointing target is always the identity attitude (or, for alignment
//! tasks, the matching inertial unit axis). Other targets are reached by a
//! change of reference outside the environment.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attitude::{axis_alignment_angle, AxisAngle, Quaternion, Vec3};
use crate::dynamics::{
    clamp_torque, integrate, DynamicsError, FailureMode, SatelliteParams, SatelliteState, TorqueCommand,
    TORQUE_LIMIT,
};
use crate::rng::{seeded, SimRng};

pub const OBS_DIM: usize = 13;
pub const ACT_DIM: usize = 3;

/// Same-axis and nominal tasks.
pub const FINE_THRESHOLD: f64 = 0.01;
/// Cross-axis underactuated tasks.
pub const COARSE_THRESHOLD: f64 = 0.05;

pub const NOMINAL_HORIZON: usize = 500;
pub const UNDERACTUATED_HORIZON: usize = 800;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("step called on a finished episode; call reset first")]
    StepAfterDone,
    #[error("step called before reset")]
    NotReset,
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// What the controller is asked to point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum AlignTarget {
    #[default]
    #[serde(rename = "full")]
    FullAttitude,
    #[serde(rename = "x")]
    BodyAxisX,
    #[serde(rename = "y")]
    BodyAxisY,
    #[serde(rename = "z")]
    BodyAxisZ,
}

impl AlignTarget {
    pub fn axis_index(self) -> Option<usize> {
        match self {
            AlignTarget::FullAttitude => None,
            AlignTarget::BodyAxisX => Some(0),
            AlignTarget::BodyAxisY => Some(1),
            AlignTarget::BodyAxisZ => Some(2),
        }
    }

    pub fn from_axis(i: usize) -> Self {
        match i {
            0 => AlignTarget::BodyAxisX,
            1 => AlignTarget::BodyAxisY,
            _ => AlignTarget::BodyAxisZ,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            AlignTarget::FullAttitude => "full",
            AlignTarget::BodyAxisX => "x",
            AlignTarget::BodyAxisY => "y",
            AlignTarget::BodyAxisZ => "z",
        }
    }
}

impl fmt::Display for AlignTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AlignTarget {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(AlignTarget::FullAttitude),
            "x" => Ok(AlignTarget::BodyAxisX),
            "y" => Ok(AlignTarget::BodyAxisY),
            "z" => Ok(AlignTarget::BodyAxisZ),
            other => Err(format!("unknown align target `{other}` (expected full, x, y or z)")),
        }
    }
}

fn unit_axis(i: usize) -> Vec3 {
    [Vec3::X, Vec3::Y, Vec3::Z][i]
}

/// Controller identity: working mode, pointing objective and success threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    mode: FailureMode,
    align: AlignTarget,
    threshold: f64,
}

impl TaskSpec {
    pub fn new(mode: FailureMode, align: AlignTarget, threshold: f64) -> Result<Self, EnvError> {
        match (mode, align) {
            (FailureMode::Nominal, AlignTarget::FullAttitude) => {}
            (FailureMode::Nominal, _) => {
                return Err(EnvError::InvalidTask("body-axis alignment requires a failed axis".into()))
            }
            (_, AlignTarget::FullAttitude) => {
                return Err(EnvError::InvalidTask("full-attitude control requires the nominal mode".into()))
            }
            _ => {}
        }
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(EnvError::InvalidTask(format!("threshold must be positive, got {threshold}")));
        }
        Ok(Self { mode, align, threshold })
    }

    /// Task with the default threshold for its kind.
    pub fn with_default_threshold(mode: FailureMode, align: AlignTarget) -> Result<Self, EnvError> {
        let same_axis = mode.failed_axis().is_none() || mode.failed_axis() == align.axis_index();
        Self::new(mode, align, if same_axis { FINE_THRESHOLD } else { COARSE_THRESHOLD })
    }

    pub fn nominal() -> Self {
        Self { mode: FailureMode::Nominal, align: AlignTarget::FullAttitude, threshold: FINE_THRESHOLD }
    }

    /// The ten controllers: one nominal plus every (failed axis, aligned axis) pair.
    pub fn suite() -> Vec<TaskSpec> {
        let mut out = vec![Self::nominal()];
        for mode in FailureMode::ALL_FAILED {
            for axis in 0..3 {
                out.push(Self::with_default_threshold(mode, AlignTarget::from_axis(axis)).expect("valid pair"));
            }
        }
        out
    }

    pub fn mode(&self) -> FailureMode {
        self.mode
    }

    pub fn align(&self) -> AlignTarget {
        self.align
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn is_nominal(&self) -> bool {
        self.mode == FailureMode::Nominal
    }

    pub fn default_horizon(&self) -> usize {
        if self.is_nominal() {
            NOMINAL_HORIZON
        } else {
            UNDERACTUATED_HORIZON
        }
    }

    /// Stable identifier, `"<failure>-<align>"`, e.g. `none-full`, `x-y`.
    pub fn id(&self) -> String {
        format!("{}-{}", self.mode.tag(), self.align.tag())
    }
}

/// Parses a task id such as `none-full` or `x-y`, with the default threshold.
impl FromStr for TaskSpec {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EnvError::InvalidTask(format!("`{s}` is not of the form <failure>-<align>"));
        let (mode, align) = s.split_once('-').ok_or_else(bad)?;
        let mode: FailureMode = mode.parse().map_err(|_| bad())?;
        let align: AlignTarget = align.parse().map_err(|_| bad())?;
        TaskSpec::with_default_threshold(mode, align)
    }
}

/// Pointing error of `state` with respect to the task's target, radians.
pub fn pointing_error(state: &SatelliteState, task: &TaskSpec) -> f64 {
    match task.align.axis_index() {
        None => state.attitude.angular_distance(&Quaternion::IDENTITY),
        Some(i) => axis_alignment_angle(&state.attitude, unit_axis(i), unit_axis(i)).expect("unit axes"),
    }
}

/// Physical observation. The network sees [`Observation::features`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Attitude with non-negative scalar part.
    pub attitude: Quaternion,
    pub omega: Vec3,
    pub rw_speed: Vec3,
    /// Last commanded torque, N·m.
    pub last_torque: Vec3,
}

impl Observation {
    pub fn new(state: &SatelliteState, last_torque: Vec3) -> Self {
        Self { attitude: state.attitude.canonical(), omega: state.omega, rw_speed: state.rw_speed, last_torque }
    }

    /// Raw 13-vector in SI units.
    pub fn to_array(&self) -> [f64; OBS_DIM] {
        let mut out = [0.0; OBS_DIM];
        out[..4].copy_from_slice(&self.attitude.to_array());
        out[4..7].copy_from_slice(&self.omega.to_array());
        out[7..10].copy_from_slice(&self.rw_speed.to_array());
        out[10..].copy_from_slice(&self.last_torque.to_array());
        out
    }

    /// Network input: wheel speeds scaled by the saturation speed and torques
    /// by the command limit, everything else as-is.
    pub fn features(&self, params: &SatelliteParams) -> [f64; OBS_DIM] {
        let mut out = self.to_array();
        for v in &mut out[7..10] {
            *v /= params.rw_saturation_speed;
        }
        for v in &mut out[10..] {
            *v /= TORQUE_LIMIT;
        }
        out
    }
}

/// Normalized action in `[−1, 1]³`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action(pub [f64; ACT_DIM]);

impl Action {
    pub fn clamped(&self) -> [f64; ACT_DIM] {
        self.0.map(|a| if a.is_nan() { 0.0 } else { a.clamp(-1.0, 1.0) })
    }

    pub fn decode(&self) -> TorqueCommand {
        let [x, y, z] = self.clamped();
        clamp_torque(Vec3::new(x, y, z) * TORQUE_LIMIT)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub threshold: f64,
    pub exponent: f64,
    pub omega_limit: f64,
    pub torque_penalty_coeff: f64,
    pub success_reward: f64,
    pub violation_reward: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            threshold: FINE_THRESHOLD,
            exponent: 0.6,
            omega_limit: 0.1,
            torque_penalty_coeff: 0.01,
            success_reward: 1.0,
            violation_reward: -1.0,
        }
    }
}

impl RewardConfig {
    pub fn for_task(task: &TaskSpec) -> Self {
        Self { threshold: task.threshold(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |field, reason: &str| Err(EnvError::InvalidConfig { field, reason: reason.into() });
        if !(self.threshold > 0.0) {
            return bad("reward.threshold", "must be positive");
        }
        if !(self.exponent > 0.0) {
            return bad("reward.exponent", "must be positive");
        }
        if !(self.omega_limit > 0.0) {
            return bad("reward.omega_limit", "must be positive");
        }
        if !(self.torque_penalty_coeff >= 0.0) {
            return bad("reward.torque_penalty_coeff", "must be non-negative");
        }
        Ok(())
    }
}

/// Shaped reward. Precedence: rate violation, then success, then the dense term.
pub fn compute_reward(theta: f64, omega: Vec3, torque: &TorqueCommand, cfg: &RewardConfig) -> f64 {
    if omega.max_abs() > cfg.omega_limit {
        return cfg.violation_reward;
    }
    if theta < cfg.threshold {
        return cfg.success_reward;
    }
    let t = torque.tau();
    let penalty = cfg.torque_penalty_coeff * (t.x.abs() + t.y.abs() + t.z.abs()) / TORQUE_LIMIT;
    0.5 * (1.0 - ((theta - cfg.threshold) / PI).powf(cfg.exponent)) - penalty
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    /// Steps per episode.
    pub horizon: usize,
    /// Actuation window per step, s.
    pub control_dt: f64,
    /// When set, each step lasts a uniform draw from this range, s.
    pub delay_range: Option<[f64; 2]>,
    /// Start rotation angle range, degrees.
    pub initial_angle_range: [f64; 2],
    pub curriculum: bool,
    /// Largest start angle at the beginning of training, degrees.
    pub curriculum_start_max: f64,
    /// Training progress at which the full angle range is reached.
    pub curriculum_ramp_end: f64,
    /// Integration substeps per actuation window.
    pub substeps: usize,
    /// End the episode when a body rate exceeds the reward's rate limit.
    #[serde(default = "enabled")]
    pub terminate_on_rate_violation: bool,
}

fn enabled() -> bool {
    true
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            horizon: NOMINAL_HORIZON,
            control_dt: 0.5,
            delay_range: Some([0.5, 1.0]),
            initial_angle_range: [30.0, 180.0],
            curriculum: true,
            curriculum_start_max: 60.0,
            curriculum_ramp_end: 0.5,
            substeps: 100,
            terminate_on_rate_violation: true,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |field, reason: String| Err(EnvError::InvalidConfig { field, reason });
        if self.horizon == 0 {
            return bad("episode.horizon", "must be positive".into());
        }
        if !(self.control_dt > 0.0) {
            return bad("episode.control_dt", "must be positive".into());
        }
        if let Some([lo, hi]) = self.delay_range {
            if !(lo >= self.control_dt && hi >= lo && hi.is_finite()) {
                return bad("episode.delay_range", format!("[{lo}, {hi}] must satisfy control_dt <= lo <= hi"));
            }
        }
        let [lo, hi] = self.initial_angle_range;
        if !(lo > 0.0 && hi >= lo && hi <= 180.0) {
            return bad("episode.initial_angle_range", format!("[{lo}, {hi}] must lie within (0, 180]"));
        }
        if !(self.curriculum_start_max > 0.0) {
            return bad("episode.curriculum_start_max", "must be positive".into());
        }
        if !(self.curriculum_ramp_end > 0.0 && self.curriculum_ramp_end <= 1.0) {
            return bad("episode.curriculum_ramp_end", "must lie within (0, 1]".into());
        }
        if self.substeps == 0 {
            return bad("episode.substeps", "must be at least 1".into());
        }
        Ok(())
    }

    /// Upper end of the start-angle range at training `progress`, degrees.
    pub fn max_start_angle(&self, progress: f64) -> f64 {
        let [lo, hi] = self.initial_angle_range;
        if !self.curriculum {
            return hi;
        }
        let start = self.curriculum_start_max.clamp(lo, hi);
        let frac = (progress / self.curriculum_ramp_end).clamp(0.0, 1.0);
        start + (hi - start) * frac
    }
}

/// Uniformly distributed unit vector from spherical coordinates.
pub fn sample_unit_axis(rng: &mut impl Rng) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..(2.0 * PI));
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Rest state at a random attitude whose rotation angle from the target is
/// drawn from `[lo, max_start_angle(progress)]` degrees.
pub fn sample_initial_state(rng: &mut impl Rng, cfg: &EpisodeConfig, progress: f64) -> SatelliteState {
    let lo = cfg.initial_angle_range[0];
    let hi = cfg.max_start_angle(progress.clamp(0.0, 1.0));
    let deg = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    sample_state_in_range(rng, deg)
}

/// Rest state rotated by `deg` degrees about a random axis.
pub fn sample_state_in_range(rng: &mut impl Rng, deg: f64) -> SatelliteState {
    let axis = sample_unit_axis(rng).normalized().unwrap_or(Vec3::Z);
    let aa = AxisAngle::new(axis, deg.to_radians()).expect("normalized axis");
    SatelliteState::at_rest(Quaternion::from_axis_angle(&aa))
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Pointing error after the step, rad.
    pub theta: f64,
    /// Simulated time since reset, s.
    pub elapsed: f64,
    /// Duration of this step, s.
    pub step_duration: f64,
    pub rw_speed: Vec3,
    /// Clamped command sent to the wheels, N·m.
    pub commanded_torque: Vec3,
    /// Body torque delivered during the actuation window, N·m.
    pub applied_torque: Vec3,
    /// Body-rate magnitude above the reward's rate limit.
    pub rate_violation: bool,
    /// Episode ended by the horizon rather than a violation.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One simulated satellite with its own random stream.
#[derive(Debug, Clone)]
pub struct AttitudeEnv {
    params: SatelliteParams,
    task: TaskSpec,
    reward: RewardConfig,
    episode: EpisodeConfig,
    rng: SimRng,
    state: SatelliteState,
    last_torque: Vec3,
    steps: usize,
    elapsed: f64,
    ready: bool,
    done: bool,
}

impl AttitudeEnv {
    pub fn new(
        params: SatelliteParams,
        task: TaskSpec,
        reward: RewardConfig,
        episode: EpisodeConfig,
        seed: u64,
    ) -> Result<Self, EnvError> {
        params.validate()?;
        reward.validate()?;
        episode.validate()?;
        Ok(Self {
            params,
            task,
            reward,
            episode,
            rng: seeded(seed, &[0xE1]),
            state: SatelliteState::default(),
            last_torque: Vec3::ZERO,
            steps: 0,
            elapsed: 0.0,
            ready: false,
            done: false,
        })
    }

    pub fn params(&self) -> &SatelliteParams {
        &self.params
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn episode_config(&self) -> &EpisodeConfig {
        &self.episode
    }

    pub fn state(&self) -> &SatelliteState {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn elapsed(&self) -> f64 {
        self.elapsed
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Starts a new episode from a sampled rest attitude.
    pub fn reset(&mut self, progress: f64) -> Observation {
        let state = sample_initial_state(&mut self.rng, &self.episode, progress);
        self.reset_to(state)
    }

    /// Starts a new episode from an explicit state.
    pub fn reset_to(&mut self, state: SatelliteState) -> Observation {
        self.state = state;
        self.last_torque = Vec3::ZERO;
        self.steps = 0;
        self.elapsed = 0.0;
        self.ready = true;
        self.done = false;
        self.observation()
    }

    pub fn observation(&self) -> Observation {
        Observation::new(&self.state, self.last_torque)
    }

    pub fn pointing_error(&self) -> f64 {
        pointing_error(&self.state, &self.task)
    }

    fn step_duration(&mut self) -> f64 {
        match self.episode.delay_range {
            Some([lo, hi]) if hi > lo => self.rng.random_range(lo..=hi),
            Some([lo, _]) => lo,
            None => self.episode.control_dt,
        }
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome, EnvError> {
        if !self.ready {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        let cmd = action.decode();
        let duration = self.step_duration();
        let actuation = self.episode.control_dt.min(duration);
        let report = integrate(&self.state, cmd, actuation, &self.params, self.task.mode(), self.episode.substeps);
        let report = match report {
            Ok(r) => r,
            Err(e) => {
                self.done = true;
                return Err(e.into());
            }
        };
        let mut state = report.state;
        let coast = duration - actuation;
        if coast > 1e-12 {
            let substeps = ((self.episode.substeps as f64) * coast / self.episode.control_dt).ceil().max(1.0) as usize;
            match integrate(&state, TorqueCommand::ZERO, coast, &self.params, self.task.mode(), substeps) {
                Ok(r) => state = r.state,
                Err(e) => {
                    self.done = true;
                    return Err(e.into());
                }
            }
        }

        self.state = state;
        self.last_torque = cmd.tau();
        self.steps += 1;
        self.elapsed += duration;

        let theta = self.pointing_error();
        let reward = compute_reward(theta, state.omega, &cmd, &self.reward);
        let rate_violation = state.omega.norm() > self.reward.omega_limit;
        let terminal = rate_violation && self.episode.terminate_on_rate_violation;
        let truncated = !terminal && self.steps >= self.episode.horizon;
        self.done = terminal || truncated;

        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            done: self.done,
            info: StepInfo {
                theta,
                elapsed: self.elapsed,
                step_duration: duration,
                rw_speed: state.rw_speed,
                commanded_torque: cmd.tau(),
                applied_torque: report.mean_torque,
                rate_violation,
                truncated,
            },
        })
    }
}
