//! Hardware-in-the-loop emulation.
//!
//! A driver owns the dynamics and publishes telemetry; a responder owns the
//! network and answers with torque commands. The two sides share nothing but
//! messages, framed on the wire as a little-endian `u32` byte length followed
//! by a JSON document:
//!
//! ```text
//! {"type":"hello","version":1,"obs_dim":13,"act_dim":3}
//! {"type":"telemetry","seq":0,"timestamp":0.0,"quaternion":[s,x,y,z],
//!  "omega":[..],"rw_speed":[..],"last_torque":[..]}
//! {"type":"command","seq":0,"torque":[..]}
//! ```
//!
//! Quaternions are scalar-first; rates in rad/s, wheel speeds in rad/s,
//! torques in N·m, times in s. `last_torque` is the torque last commanded.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread::JoinHandle;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attitude::{MathError, Quaternion, Vec3};
use crate::dynamics::{clamp_torque, integrate, DynamicsError, FailureMode, SatelliteParams, SatelliteState, TORQUE_LIMIT};
use crate::env::{compute_reward, pointing_error, Action, AlignTarget, EnvError, Observation, RewardConfig, TaskSpec, ACT_DIM, OBS_DIM};
use crate::eval::EpisodeTrace;
use crate::nn::MlpActorCritic;
use crate::rng::{seeded, SimRng};

pub const PROTOCOL_VERSION: u32 = 1;
/// Largest accepted frame body, bytes.
pub const MAX_FRAME: usize = 1 << 20;
/// Allowed deviation of telemetry quaternions from unit norm.
pub const QUATERNION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("transport: {0}")]
    Io(#[from] std::io::Error),
    #[error("responder did not answer within {0:?}")]
    Timeout(Duration),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("session refused: {0}")]
    Refused(String),
    #[error("responder error {code:?}: {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryMessage {
    pub seq: u64,
    pub timestamp: f64,
    pub quaternion: [f64; 4],
    pub omega: [f64; 3],
    pub rw_speed: [f64; 3],
    pub last_torque: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandMessage {
    pub seq: u64,
    pub torque: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    Hello { version: u32, obs_dim: usize, act_dim: usize },
    Telemetry(TelemetryMessage),
    Bye,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    BadQuaternion,
    NonFinite,
    OutOfOrder,
    NoSession,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Reply {
    Welcome { version: u32 },
    Refused { reason: String },
    Command(CommandMessage),
    Error { code: ErrorCode, message: String },
    Goodbye,
}

/// Frame body (without the length prefix).
pub fn encode<T: Serialize>(msg: &T) -> Vec<u8> {
    serde_json::to_vec(msg).expect("message serializes")
}

pub fn decode<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, HarnessError> {
    serde_json::from_slice(body).map_err(|e| HarnessError::Protocol(e.to_string()))
}

pub fn write_frame(w: &mut impl Write, body: &[u8]) -> Result<(), HarnessError> {
    if body.len() > MAX_FRAME {
        return Err(HarnessError::Protocol(format!("frame of {} bytes exceeds limit", body.len())));
    }
    w.write_all(&(body.len() as u32).to_le_bytes())?;
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `None` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>, HarnessError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_le_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(HarnessError::Protocol(format!("frame of {n} bytes exceeds limit")));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub trait Responder {
    fn handle(&mut self, req: &Request) -> Reply;

    /// Handles a raw frame body, answering undecodable input with an error reply.
    fn handle_frame(&mut self, body: &[u8]) -> Vec<u8> {
        let reply = match decode::<Request>(body) {
            Ok(req) => self.handle(&req),
            Err(e) => Reply::Error { code: ErrorCode::Malformed, message: e.to_string() },
        };
        encode(&reply)
    }
}

fn error_reply(code: ErrorCode, message: impl Into<String>) -> Reply {
    Reply::Error { code, message: message.into() }
}

/// Session bookkeeping shared by responders: handshake and sequence checks.
#[derive(Debug, Clone, Default)]
struct Session {
    open: bool,
    last_seq: Option<u64>,
}

impl Session {
    fn hello(&mut self, version: u32, obs_dim: usize, act_dim: usize, expect: (usize, usize)) -> Reply {
        if version != PROTOCOL_VERSION {
            return Reply::Refused { reason: format!("protocol version {version} unsupported") };
        }
        if (obs_dim, act_dim) != expect {
            return Reply::Refused {
                reason: format!("shape {obs_dim}→{act_dim} does not match network {}→{}", expect.0, expect.1),
            };
        }
        *self = Session { open: true, last_seq: None };
        Reply::Welcome { version: PROTOCOL_VERSION }
    }

    /// Validates telemetry and returns the observed state, or an error reply.
    /// Nothing changes on rejection.
    fn accept(&mut self, t: &TelemetryMessage) -> Result<(Quaternion, Vec3, Vec3, Vec3), Reply> {
        if !self.open {
            return Err(error_reply(ErrorCode::NoSession, "telemetry before hello"));
        }
        if self.last_seq.is_some_and(|s| t.seq <= s) {
            return Err(error_reply(ErrorCode::OutOfOrder, format!("sequence {} after {:?}", t.seq, self.last_seq)));
        }
        let finite = t.timestamp.is_finite()
            && t.omega.iter().chain(&t.rw_speed).chain(&t.last_torque).all(|v| v.is_finite());
        if !finite {
            return Err(error_reply(ErrorCode::NonFinite, "non-finite telemetry"));
        }
        let q = match Quaternion::from_unit_with_tolerance(t.quaternion, QUATERNION_TOLERANCE) {
            Ok(q) => q,
            Err(MathError::NonFinite) => return Err(error_reply(ErrorCode::NonFinite, "non-finite quaternion")),
            Err(e) => return Err(error_reply(ErrorCode::BadQuaternion, e.to_string())),
        };
        self.last_seq = Some(t.seq);
        let v = |a: [f64; 3]| Vec3::new(a[0], a[1], a[2]);
        Ok((q, v(t.omega), v(t.rw_speed), v(t.last_torque)))
    }
}

/// Deterministic actor behind the message interface.
#[derive(Debug, Clone)]
pub struct PolicyResponder {
    net: MlpActorCritic,
    params: SatelliteParams,
    session: Session,
}

impl PolicyResponder {
    /// `params` supplies the feature scaling the network was trained with.
    pub fn new(net: MlpActorCritic, params: SatelliteParams) -> Self {
        Self { net, params, session: Session::default() }
    }
}

impl Responder for PolicyResponder {
    fn handle(&mut self, req: &Request) -> Reply {
        match req {
            Request::Hello { version, obs_dim, act_dim } => {
                let arch = self.net.architecture();
                self.session.hello(*version, *obs_dim, *act_dim, (arch.obs_dim, arch.act_dim))
            }
            Request::Telemetry(t) => {
                let (attitude, omega, rw_speed, last_torque) = match self.session.accept(t) {
                    Ok(v) => v,
                    Err(reply) => return reply,
                };
                let obs = Observation { attitude: attitude.canonical(), omega, rw_speed, last_torque };
                match self.net.policy_forward(&obs.features(&self.params)) {
                    Ok(p) => Reply::Command(CommandMessage { seq: t.seq, torque: Action(p.mean).decode().tau().to_array() }),
                    Err(e) => error_reply(ErrorCode::NonFinite, e.to_string()),
                }
            }
            Request::Bye => {
                self.session = Session::default();
                Reply::Goodbye
            }
        }
    }
}

/// Always commands zero torque.
#[derive(Debug, Clone, Default)]
pub struct NullResponder {
    session: Session,
}

impl Responder for NullResponder {
    fn handle(&mut self, req: &Request) -> Reply {
        match req {
            Request::Hello { version, obs_dim, act_dim } => {
                self.session.hello(*version, *obs_dim, *act_dim, (OBS_DIM, ACT_DIM))
            }
            Request::Telemetry(t) => match self.session.accept(t) {
                Ok(_) => Reply::Command(CommandMessage { seq: t.seq, torque: [0.0; 3] }),
                Err(reply) => reply,
            },
            Request::Bye => {
                self.session = Session::default();
                Reply::Goodbye
            }
        }
    }
}

pub trait Transport {
    fn exchange(&mut self, req: &Request) -> Result<Reply, HarnessError>;
}

/// Runs the responder in the calling thread, still passing every message
/// through its wire encoding.
#[derive(Debug)]
pub struct InProcess<R> {
    pub responder: R,
}

impl<R: Responder> Transport for InProcess<R> {
    fn exchange(&mut self, req: &Request) -> Result<Reply, HarnessError> {
        let reply = self.responder.handle_frame(&encode(req));
        decode(&reply)
    }
}

/// Client side of a TCP session.
#[derive(Debug)]
pub struct TcpTransport {
    stream: TcpStream,
    timeout: Duration,
}

impl TcpTransport {
    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self, HarnessError> {
        let stream = TcpStream::connect_timeout(&addr, timeout)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(Self { stream, timeout })
    }
}

impl Transport for TcpTransport {
    fn exchange(&mut self, req: &Request) -> Result<Reply, HarnessError> {
        write_frame(&mut self.stream, &encode(req))?;
        match read_frame(&mut self.stream) {
            Ok(Some(body)) => decode(&body),
            Ok(None) => Err(HarnessError::Protocol("responder closed the connection".into())),
            Err(HarnessError::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                Err(HarnessError::Timeout(self.timeout))
            }
            Err(e) => Err(e),
        }
    }
}

/// Serves requests from one stream until the peer says goodbye or disconnects.
pub fn serve<R: Responder>(stream: &mut (impl Read + Write), responder: &mut R) -> Result<(), HarnessError> {
    while let Some(body) = read_frame(stream)? {
        let reply = responder.handle_frame(&body);
        write_frame(stream, &reply)?;
        if matches!(decode::<Reply>(&reply), Ok(Reply::Goodbye)) {
            break;
        }
    }
    Ok(())
}

/// Binds a loopback port and serves one session on a background thread.
/// The thread returns the responder when the session ends.
pub fn spawn_tcp_responder<R: Responder + Send + 'static>(
    mut responder: R,
) -> Result<(SocketAddr, JoinHandle<Result<R, HarnessError>>), HarnessError> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let handle = std::thread::spawn(move || {
        let (mut stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        serve(&mut stream, &mut responder)?;
        Ok(responder)
    });
    Ok((addr, handle))
}

/// Time between a command being sent and the next telemetry sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatencyModel {
    Fixed { seconds: f64 },
    Uniform { lo: f64, hi: f64, seed: u64 },
    /// Cycles through recorded latencies.
    Replay { samples: Vec<f64> },
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::Uniform { lo: 0.5, hi: 1.0, seed: 0 }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        let valid = match self {
            LatencyModel::Fixed { seconds } => ok(*seconds),
            LatencyModel::Uniform { lo, hi, .. } => ok(*lo) && ok(*hi) && lo <= hi,
            LatencyModel::Replay { samples } => !samples.is_empty() && samples.iter().all(|&s| ok(s)),
        };
        if valid {
            Ok(())
        } else {
            Err(HarnessError::Plan(format!("latencies must be positive and finite: {self:?}")))
        }
    }

    pub fn sampler(&self) -> LatencySampler {
        let rng = match self {
            LatencyModel::Uniform { seed, .. } => seeded(*seed, &[0x1A7]),
            _ => seeded(0, &[0x1A7]),
        };
        LatencySampler { model: self.clone(), rng, index: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct LatencySampler {
    model: LatencyModel,
    rng: SimRng,
    index: usize,
}

impl LatencySampler {
    pub fn next_latency(&mut self) -> f64 {
        match &self.model {
            LatencyModel::Fixed { seconds } => *seconds,
            LatencyModel::Uniform { lo, hi, .. } if hi > lo => self.rng.random_range(*lo..=*hi),
            LatencyModel::Uniform { lo, .. } => *lo,
            LatencyModel::Replay { samples } => {
                let v = samples[self.index % samples.len()];
                self.index += 1;
                v
            }
        }
    }
}

fn default_rate_limit() -> f64 {
    0.1
}

fn default_dwell() -> f64 {
    5.0
}

fn default_control_dt() -> f64 {
    0.5
}

fn default_substeps() -> usize {
    100
}

fn default_timeout() -> f64 {
    5.0
}

/// One experiment. Attitudes are inertial; the run itself happens in the
/// target frame, where the goal is the identity attitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    /// Start attitude, scalar first.
    pub start: [f64; 4],
    #[serde(default)]
    pub start_omega: [f64; 3],
    #[serde(default)]
    pub start_rw_speed: [f64; 3],
    /// Target attitude, scalar first; identity when absent.
    #[serde(default)]
    pub target: Option<[f64; 4]>,
    #[serde(default)]
    pub failure: FailureMode,
    #[serde(default)]
    pub align: AlignTarget,
    /// Accuracy band, rad; the task default when absent.
    #[serde(default)]
    pub accuracy: Option<f64>,
    pub time_limit_s: f64,
    #[serde(default = "default_rate_limit")]
    pub rate_limit: f64,
    /// Time the error must stay inside the band before success is declared, s.
    #[serde(default = "default_dwell")]
    pub dwell_s: f64,
    #[serde(default)]
    pub latency: LatencyModel,
    #[serde(default = "default_control_dt")]
    pub control_dt: f64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "default_timeout")]
    pub response_timeout_s: f64,
}

impl ExperimentPlan {
    pub fn new(start: Quaternion, task: &TaskSpec, time_limit_s: f64) -> Self {
        Self {
            start: start.to_array(),
            start_omega: [0.0; 3],
            start_rw_speed: [0.0; 3],
            target: None,
            failure: task.mode(),
            align: task.align(),
            accuracy: Some(task.threshold()),
            time_limit_s,
            rate_limit: default_rate_limit(),
            dwell_s: default_dwell(),
            latency: LatencyModel::default(),
            control_dt: default_control_dt(),
            substeps: default_substeps(),
            response_timeout_s: default_timeout(),
        }
    }

    pub fn task(&self) -> Result<TaskSpec, HarnessError> {
        let task = match self.accuracy {
            Some(a) => TaskSpec::new(self.failure, self.align, a),
            None => TaskSpec::with_default_threshold(self.failure, self.align),
        };
        task.map_err(|e: EnvError| HarnessError::Plan(e.to_string()))
    }

    /// Start state expressed relative to the target frame.
    pub fn initial_state(&self) -> Result<SatelliteState, HarnessError> {
        let bad = |e: MathError| HarnessError::Plan(e.to_string());
        let start = Quaternion::from_unit_with_tolerance(self.start, QUATERNION_TOLERANCE).map_err(bad)?;
        let target = match self.target {
            Some(t) => Quaternion::from_unit_with_tolerance(t, QUATERNION_TOLERANCE).map_err(bad)?,
            None => Quaternion::IDENTITY,
        };
        let v = |a: [f64; 3]| Vec3::new(a[0], a[1], a[2]);
        let attitude = if self.target.is_some() { target.conjugate().compose(&start) } else { start };
        Ok(SatelliteState { attitude, omega: v(self.start_omega), rw_speed: v(self.start_rw_speed) })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.task()?;
        let state = self.initial_state()?;
        if !(state.omega.is_finite() && state.rw_speed.is_finite()) {
            return Err(HarnessError::Plan("start rates must be finite".into()));
        }
        let positive = [
            ("time_limit_s", self.time_limit_s),
            ("rate_limit", self.rate_limit),
            ("control_dt", self.control_dt),
            ("response_timeout_s", self.response_timeout_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HarnessError::Plan(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.dwell_s >= 0.0 && self.dwell_s.is_finite()) {
            return Err(HarnessError::Plan(format!("dwell_s must be non-negative, got {}", self.dwell_s)));
        }
        if self.substeps == 0 {
            return Err(HarnessError::Plan("substeps must be at least 1".into()));
        }
        self.latency.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    TargetReached,
    RateViolation,
    TimeLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub verdict: Verdict,
    pub trace: EpisodeTrace,
    /// Why the run ended early, when it was not the dynamics.
    pub diagnostic: Option<String>,
}

/// Closes the loop between the dynamics and a responder until the target is
/// held for `dwell_s`, a rate exceeds the limit, or time runs out.
///
/// Each cycle applies the returned torque for `min(latency, control_dt)` and
/// then coasts for the remaining latency.
pub fn run_experiment(
    plan: &ExperimentPlan,
    transport: &mut dyn Transport,
    params: &SatelliteParams,
) -> Result<ExperimentResult, HarnessError> {
    plan.validate()?;
    params.validate()?;
    let task = plan.task()?;
    let reward_cfg = RewardConfig { omega_limit: plan.rate_limit, ..RewardConfig::for_task(&task) };
    let mut latency = plan.latency.sampler();
    let mut state = plan.initial_state()?;

    match transport.exchange(&Request::Hello { version: PROTOCOL_VERSION, obs_dim: OBS_DIM, act_dim: ACT_DIM })? {
        Reply::Welcome { .. } => {}
        Reply::Refused { reason } => return Err(HarnessError::Refused(reason)),
        other => return Err(HarnessError::Protocol(format!("unexpected handshake reply {other:?}"))),
    }

    let mut trace = EpisodeTrace::default();
    let mut t = 0.0;
    let mut last_torque = Vec3::ZERO;
    let mut theta = pointing_error(&state, &task);
    trace.record(t, &state, theta, Vec3::ZERO, Vec3::ZERO, 0.0);
    let mut inside_since = (theta < task.threshold()).then_some(0.0);
    let mut diagnostic = None;

    let verdict = 'run: loop {
        if inside_since.is_some_and(|s| t - s >= plan.dwell_s) {
            break Verdict::TargetReached;
        }
        if t >= plan.time_limit_s {
            break Verdict::TimeLimit;
        }
        let seq = (trace.len() - 1) as u64;
        let telemetry = TelemetryMessage {
            seq,
            timestamp: t,
            quaternion: state.attitude.to_array(),
            omega: state.omega.to_array(),
            rw_speed: state.rw_speed.to_array(),
            last_torque: last_torque.to_array(),
        };
        let cmd = match transport.exchange(&Request::Telemetry(telemetry)) {
            Ok(Reply::Command(c)) if c.seq == seq => clamp_torque(Vec3::new(c.torque[0], c.torque[1], c.torque[2])),
            Ok(Reply::Command(c)) => {
                return Err(HarnessError::Protocol(format!("command echoes sequence {} instead of {seq}", c.seq)))
            }
            Ok(Reply::Error { code, message }) => return Err(HarnessError::Remote { code, message }),
            Ok(other) => return Err(HarnessError::Protocol(format!("unexpected reply {other:?}"))),
            Err(HarnessError::Timeout(d)) => {
                diagnostic = Some(format!("responder timed out after {d:?} at t = {t} s"));
                break 'run Verdict::TimeLimit;
            }
            Err(e) => return Err(e),
        };

        let duration = latency.next_latency();
        let actuation = plan.control_dt.min(duration);
        let report = integrate(&state, cmd, actuation, params, plan.failure, plan.substeps)?;
        state = report.state;
        let coast = duration - actuation;
        if coast > 1e-12 {
            let substeps = ((plan.substeps as f64) * coast / plan.control_dt).ceil().max(1.0) as usize;
            state = integrate(&state, clamp_torque(Vec3::ZERO), coast, params, plan.failure, substeps)?.state;
        }
        t += duration;
        last_torque = cmd.tau();
        theta = pointing_error(&state, &task);
        let reward = compute_reward(theta, state.omega, &cmd, &reward_cfg);
        trace.record(t, &state, theta, cmd.tau(), report.mean_torque, reward);

        if state.omega.norm() > plan.rate_limit {
            trace.rate_violations += 1;
            break Verdict::RateViolation;
        }
        if theta < task.threshold() {
            inside_since.get_or_insert(t);
        } else {
            inside_since = None;
        }
    };
    // A failed goodbye does not invalidate a finished run.
    let _ = transport.exchange(&Request::Bye);
    Ok(ExperimentResult { verdict, trace, diagnostic })
}

/// Ensures a torque triple is within the command limit.
pub fn torque_in_range(torque: &[f64; 3]) -> bool {
    torque.iter().all(|t| t.abs() <= TORQUE_LIMIT)
}
