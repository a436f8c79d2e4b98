//! Evaluation of trained controllers: deterministic rollouts, per-step error
//! envelopes across episodes, convergence statistics and file export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attitude::{Quaternion, Vec3};
use crate::dynamics::{rad_s_to_rpm, SatelliteParams, SatelliteState};
use crate::env::{sample_state_in_range, Action, AttitudeEnv, EnvError, EpisodeConfig, RewardConfig, TaskSpec, ACT_DIM, OBS_DIM};
use crate::nn::{MlpActorCritic, NnError};
use crate::rng::{derive_seed, seeded};

pub const ENVELOPE_SCHEMA: &str = "envelope/v1";
pub const TRACE_SCHEMA: &str = "trace/v1";
pub const SUMMARY_SCHEMA: &str = "summary/v1";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("incompatible network: {0}")]
    Incompatible(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |e| EvalError::Io { path: path.to_path_buf(), message: e.to_string() }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> EvalError + '_ {
    move |e| EvalError::Io { path: path.to_path_buf(), message: e.to_string() }
}

/// Per-step record of one episode. Index 0 is the initial state at `t = 0`
/// with zero torque and reward.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub time: Vec<f64>,
    pub attitude: Vec<Quaternion>,
    /// Pointing error, rad.
    pub error: Vec<f64>,
    pub omega: Vec<Vec3>,
    /// Wheel speeds, rad/s.
    pub rw_speed: Vec<Vec3>,
    pub commanded_torque: Vec<Vec3>,
    /// Mean torque the wheels actually delivered over the actuation window.
    pub applied_torque: Vec<Vec3>,
    pub reward: Vec<f64>,
    pub rate_violations: usize,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn record(&mut self, time: f64, state: &SatelliteState, error: f64, cmd: Vec3, applied: Vec3, reward: f64) {
        self.time.push(time);
        self.attitude.push(state.attitude);
        self.error.push(error);
        self.omega.push(state.omega);
        self.rw_speed.push(state.rw_speed);
        self.commanded_torque.push(cmd);
        self.applied_torque.push(applied);
        self.reward.push(reward);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_episodes: usize,
    /// Start rotation angle range, degrees.
    pub start_angle_range: [f64; 2],
    pub episode_steps: usize,
    /// Use the policy mean instead of sampling.
    pub deterministic: bool,
    /// Draw step durations from the training delay range instead of fixed steps.
    pub delays: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: 200,
            start_angle_range: [144.0, 180.0],
            episode_steps: 1600,
            deterministic: true,
            delays: false,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let [lo, hi] = self.start_angle_range;
        if !(0.0..=180.0).contains(&lo) || !(lo..=180.0).contains(&hi) {
            return Err(EvalError::Usage(format!("start angle range [{lo}, {hi}] must satisfy 0 ≤ lo ≤ hi ≤ 180")));
        }
        if self.n_episodes == 0 || self.episode_steps == 0 {
            return Err(EvalError::Usage("episode count and length must be positive".into()));
        }
        Ok(())
    }
}

/// Simulation context shared by all evaluation episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalTarget {
    pub params: SatelliteParams,
    pub task: TaskSpec,
    pub reward: RewardConfig,
    /// Supplies `control_dt`, `delay_range` and `substeps`; horizon and
    /// termination are overridden.
    pub episode: EpisodeConfig,
}

impl EvalTarget {
    pub fn for_task(task: TaskSpec) -> Self {
        Self {
            params: SatelliteParams::default(),
            task,
            reward: RewardConfig::for_task(&task),
            episode: EpisodeConfig::default(),
        }
    }
}

pub fn check_compatible(net: &MlpActorCritic) -> Result<(), EvalError> {
    let arch = net.architecture();
    if arch.obs_dim != OBS_DIM || arch.act_dim != ACT_DIM {
        return Err(EvalError::Incompatible(format!(
            "network maps {} observations to {} actions, the environment needs {OBS_DIM} → {ACT_DIM}",
            arch.obs_dim, arch.act_dim
        )));
    }
    Ok(())
}

/// Runs one episode from an explicit start state with a fixed-length trace.
pub fn run_episode(
    net: &MlpActorCritic,
    target: &EvalTarget,
    cfg: &EvalConfig,
    episode_index: u64,
) -> Result<EpisodeTrace, EvalError> {
    let mut rng = seeded(cfg.seed, &[0xE7, episode_index]);
    let [lo, hi] = cfg.start_angle_range;
    let deg = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let start = sample_state_in_range(&mut rng, deg);

    let episode = EpisodeConfig {
        horizon: cfg.episode_steps,
        delay_range: if cfg.delays { target.episode.delay_range } else { None },
        curriculum: false,
        terminate_on_rate_violation: false,
        ..target.episode
    };
    let mut env = AttitudeEnv::new(
        target.params,
        target.task,
        target.reward,
        episode,
        derive_seed(cfg.seed, &[0xE8, episode_index]),
    )?;
    let mut obs = env.reset_to(start);
    let mut trace = EpisodeTrace::default();
    trace.record(0.0, &start, env.pointing_error(), Vec3::ZERO, Vec3::ZERO, 0.0);
    for _ in 0..cfg.episode_steps {
        let policy = net.policy_forward(&obs.features(&target.params))?;
        let action = if cfg.deterministic { policy.mean } else { policy.sample(&mut rng) };
        let out = env.step(Action(action))?;
        trace.record(
            out.info.elapsed,
            env.state(),
            out.info.theta,
            out.info.commanded_torque,
            out.info.applied_torque,
            out.reward,
        );
        if out.info.rate_violation {
            trace.rate_violations += 1;
        }
        obs = out.observation;
    }
    Ok(trace)
}

/// Runs `cfg.n_episodes` episodes in parallel. Episode `i` draws from its own
/// stream, so results do not depend on the worker count.
pub fn run_eval_episodes(net: &MlpActorCritic, target: &EvalTarget, cfg: &EvalConfig) -> Result<Vec<EpisodeTrace>, EvalError> {
    check_compatible(net)?;
    cfg.validate()?;
    (0..cfg.n_episodes as u64).into_par_iter().map(|i| run_episode(net, target, cfg, i)).collect()
}

/// Per-step pointing-error statistics across episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeStats {
    pub episodes: usize,
    pub time: Vec<f64>,
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
    pub max: Vec<f64>,
}

impl EnvelopeStats {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }
}

/// Per-step mean, population std and max of the error columns. Each column
/// is summed in sorted order so the result does not depend on episode order.
pub fn aggregate_envelope(traces: &[EpisodeTrace]) -> Result<EnvelopeStats, EvalError> {
    let first = traces.first().ok_or_else(|| EvalError::Usage("no traces to aggregate".into()))?;
    let steps = first.len();
    if traces.iter().any(|t| t.len() != steps || t.error.len() != steps) {
        return Err(EvalError::Usage("traces differ in length".into()));
    }
    let n = traces.len() as f64;
    let mut stats = EnvelopeStats {
        episodes: traces.len(),
        time: first.time.clone(),
        mean: Vec::with_capacity(steps),
        std: Vec::with_capacity(steps),
        max: Vec::with_capacity(steps),
    };
    let mut column = Vec::with_capacity(traces.len());
    for k in 0..steps {
        column.clear();
        column.extend(traces.iter().map(|t| t.error[k]));
        column.sort_by(f64::total_cmp);
        let mean = column.iter().sum::<f64>() / n;
        let var = column.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
        stats.mean.push(mean);
        stats.std.push(var.sqrt());
        stats.max.push(*column.last().expect("non-empty"));
    }
    Ok(stats)
}

/// Time of the first step from which the error stays below `accuracy` for
/// the rest of the trace.
pub fn settled_time(time: &[f64], error: &[f64], accuracy: f64) -> Option<f64> {
    let outside = error.iter().rposition(|&e| !(e < accuracy));
    match outside {
        None if !error.is_empty() => Some(time[0]),
        None => None,
        Some(k) if k + 1 < error.len() => Some(time[k + 1]),
        Some(_) => None,
    }
}

/// Time of the first step with error below `accuracy`.
pub fn first_crossing_time(time: &[f64], error: &[f64], accuracy: f64) -> Option<f64> {
    error.iter().position(|&e| e < accuracy).map(|k| time[k])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub task: String,
    pub failure: String,
    pub align: String,
    pub accuracy_rad: f64,
    pub episodes: usize,
    pub horizon_s: f64,
    /// Mean settled time over the converged episodes; absent when none converged.
    pub mean_convergence_time_s: Option<f64>,
    pub converged_fraction: f64,
    pub mean_first_crossing_s: Option<f64>,
    pub first_crossing_fraction: f64,
    pub max_rate_violations: usize,
}

fn mean_of(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

pub fn convergence_time(task: &TaskSpec, traces: &[EpisodeTrace], accuracy: f64) -> Result<ConvergenceReport, EvalError> {
    if !(accuracy > 0.0) {
        return Err(EvalError::Usage(format!("accuracy must be positive, got {accuracy}")));
    }
    let settled: Vec<f64> = traces.iter().filter_map(|t| settled_time(&t.time, &t.error, accuracy)).collect();
    let crossing: Vec<f64> = traces.iter().filter_map(|t| first_crossing_time(&t.time, &t.error, accuracy)).collect();
    let n = traces.len();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(ConvergenceReport {
        task: task.id(),
        failure: task.mode().tag().to_string(),
        align: task.align().tag().to_string(),
        accuracy_rad: accuracy,
        episodes: n,
        horizon_s: traces.iter().filter_map(|t| t.time.last().copied()).fold(0.0, f64::max),
        mean_convergence_time_s: mean_of(&settled),
        converged_fraction: frac(settled.len()),
        mean_first_crossing_s: mean_of(&crossing),
        first_crossing_fraction: frac(crossing.len()),
        max_rate_violations: traces.iter().map(|t| t.rate_violations).max().unwrap_or(0),
    })
}

pub fn summary_key(report: &ConvergenceReport) -> String {
    format!("{}:{}", report.failure, report.align)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub tasks: BTreeMap<String, ConvergenceReport>,
}

impl Summary {
    pub fn new(reports: &[ConvergenceReport]) -> Self {
        Self {
            schema: SUMMARY_SCHEMA.to_string(),
            tasks: reports.iter().map(|r| (summary_key(r), r.clone())).collect(),
        }
    }
}

pub fn write_envelope_csv(path: &Path, stats: &EnvelopeStats) -> Result<(), EvalError> {
    let mut out = format!("# schema={ENVELOPE_SCHEMA} episodes={}\n", stats.episodes).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["step", "time_s", "mean", "std", "max"]).map_err(csv_err(path))?;
        for k in 0..stats.len() {
            w.write_record([
                k.to_string(),
                stats.time[k].to_string(),
                stats.mean[k].to_string(),
                stats.std[k].to_string(),
                stats.max[k].to_string(),
            ])
            .map_err(csv_err(path))?;
        }
        w.flush().map_err(io_err(path))?;
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_envelope_csv(path: &Path) -> Result<EnvelopeStats, EvalError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |m: &str| EvalError::Io { path: path.to_path_buf(), message: m.to_string() };
    let (first, body) = text.split_once('\n').ok_or_else(|| bad("empty file"))?;
    let episodes = first
        .strip_prefix(&format!("# schema={ENVELOPE_SCHEMA} episodes="))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| bad("missing or unsupported schema line"))?;
    let mut stats = EnvelopeStats { episodes, time: vec![], mean: vec![], std: vec![], max: vec![] };
    let mut r = csv::Reader::from_reader(body.as_bytes());
    for row in r.deserialize::<(usize, f64, f64, f64, f64)>() {
        let (step, t, mean, std, max) = row.map_err(csv_err(path))?;
        if step != stats.time.len() {
            return Err(bad("steps out of order"));
        }
        stats.time.push(t);
        stats.mean.push(mean);
        stats.std.push(std);
        stats.max.push(max);
    }
    Ok(stats)
}

const TRACE_COLUMNS: [&str; 25] = [
    "step",
    "time_s",
    "q_s",
    "q_x",
    "q_y",
    "q_z",
    "error_rad",
    "omega_x",
    "omega_y",
    "omega_z",
    "rw_x_rad_s",
    "rw_y_rad_s",
    "rw_z_rad_s",
    "rw_x_rpm",
    "rw_y_rpm",
    "rw_z_rpm",
    "tau_cmd_x",
    "tau_cmd_y",
    "tau_cmd_z",
    "tau_applied_x",
    "tau_applied_y",
    "tau_applied_z",
    "reward",
    "schema",
    "episode",
];

pub fn write_trace_csv(path: &Path, trace: &EpisodeTrace, episode: usize) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(TRACE_COLUMNS).map_err(csv_err(path))?;
    for k in 0..trace.len() {
        let mut row = vec![k.to_string(), trace.time[k].to_string()];
        row.extend(trace.attitude[k].to_array().iter().map(|x| x.to_string()));
        row.push(trace.error[k].to_string());
        let vecs = [trace.omega[k], trace.rw_speed[k], trace.rw_speed[k].map(rad_s_to_rpm)];
        row.extend(vecs.iter().flat_map(|v| v.to_array()).map(|x| x.to_string()));
        row.extend(
            [trace.commanded_torque[k], trace.applied_torque[k]].iter().flat_map(|v| v.to_array()).map(|x| x.to_string()),
        );
        row.push(trace.reward[k].to_string());
        row.push(TRACE_SCHEMA.to_string());
        row.push(episode.to_string());
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_summary_json(path: &Path, reports: &[ConvergenceReport]) -> Result<(), EvalError> {
    let json = serde_json::to_string_pretty(&Summary::new(reports)).expect("summary serializes");
    fs::write(path, json + "\n").map_err(io_err(path))
}

/// Writes `envelope.csv`, `summary.json` and `trace-NNNN.csv` for every
/// trace into `dir`.
pub fn export_results(
    dir: &Path,
    stats: &EnvelopeStats,
    reports: &[ConvergenceReport],
    traces: &[EpisodeTrace],
) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_envelope_csv(&dir.join("envelope.csv"), stats)?;
    write_summary_json(&dir.join("summary.json"), reports)?;
    for (i, t) in traces.iter().enumerate() {
        write_trace_csv(&dir.join(format!("trace-{i:04}.csv")), t, i)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::FailureMode;
    use crate::env::AlignTarget;
    use crate::nn::Architecture;
    use proptest::prelude::*;

    fn synthetic(errors: &[f64], dt: f64) -> EpisodeTrace {
        let mut t = EpisodeTrace::default();
        for (k, &e) in errors.iter().enumerate() {
            t.record(k as f64 * dt, &SatelliteState::default(), e, Vec3::ZERO, Vec3::ZERO, 0.0);
        }
        t
    }

    fn small_cfg(n: usize, steps: usize) -> EvalConfig {
        EvalConfig { n_episodes: n, episode_steps: steps, seed: 4, ..EvalConfig::default() }
    }

    fn target() -> EvalTarget {
        let mut t = EvalTarget::for_task(TaskSpec::nominal());
        t.episode.substeps = 10;
        t
    }

    #[test]
    fn reruns_are_identical_and_starts_in_range() {
        let net = MlpActorCritic::new(Architecture::default(), &mut seeded(1, &[]));
        let cfg = small_cfg(3, 20);
        let a = run_eval_episodes(&net, &target(), &cfg).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, run_eval_episodes(&net, &target(), &cfg).unwrap());
        for t in &a {
            assert!((144f64.to_radians() - 1e-9..=180f64.to_radians() + 1e-9).contains(&t.error[0]));
            assert!(t.time.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn full_length_episode_ends_at_800_s() {
        let net = MlpActorCritic::zeros(Architecture::default());
        let t = run_eval_episodes(&net, &target(), &small_cfg(1, 1600)).unwrap();
        assert_eq!(t[0].len(), 1601);
        assert!((t[0].time[1600] - 800.0).abs() < 1e-9);
    }

    #[test]
    fn failed_wheel_never_delivers_torque() {
        let task = TaskSpec::with_default_threshold(FailureMode::FailedX, AlignTarget::BodyAxisX).unwrap();
        let mut tgt = EvalTarget::for_task(task);
        tgt.episode.substeps = 10;
        let net = MlpActorCritic::new(Architecture::default(), &mut seeded(2, &[]));
        let traces = run_eval_episodes(&net, &tgt, &small_cfg(2, 30)).unwrap();
        assert!(traces.iter().flat_map(|t| &t.applied_torque).all(|v| v.x == 0.0));
    }

    #[test]
    fn mismatched_network_is_rejected() {
        let arch = Architecture { obs_dim: 10, ..Architecture::default() };
        let net = MlpActorCritic::zeros(arch);
        assert!(matches!(run_eval_episodes(&net, &target(), &small_cfg(1, 5)), Err(EvalError::Incompatible(_))));
    }

    #[test]
    fn envelope_hand_cases() {
        let single = synthetic(&[0.5, 0.2, 0.1], 0.5);
        let s = aggregate_envelope(std::slice::from_ref(&single)).unwrap();
        assert_eq!(s.mean, single.error);
        assert_eq!(s.max, single.error);
        assert_eq!(s.std, vec![0.0; 3]);

        let s = aggregate_envelope(&[synthetic(&[0.1; 4], 0.5), synthetic(&[0.3; 4], 0.5)]).unwrap();
        for k in 0..4 {
            assert!((s.mean[k] - 0.2).abs() < 1e-15);
            assert!((s.std[k] - 0.1).abs() < 1e-15);
            assert_eq!(s.max[k], 0.3);
        }
        assert!(aggregate_envelope(&[]).is_err());
        assert!(aggregate_envelope(&[synthetic(&[0.1], 0.5), synthetic(&[0.1, 0.2], 0.5)]).is_err());
    }

    #[test]
    fn convergence_hand_cases() {
        let task = TaskSpec::nominal();
        let below = synthetic(&[0.001; 10], 0.5);
        let mut errs = vec![1.0; 146];
        errs.extend([0.005; 20]);
        let crossing = synthetic(&errs, 0.5);
        let relapse = synthetic(&[1.0, 0.001, 0.02, 0.02], 0.5);
        assert_eq!(settled_time(&below.time, &below.error, 0.01), Some(0.0));
        assert_eq!(settled_time(&crossing.time, &crossing.error, 0.01), Some(73.0));
        assert_eq!(settled_time(&relapse.time, &relapse.error, 0.01), None);
        assert_eq!(first_crossing_time(&relapse.time, &relapse.error, 0.01), Some(0.5));

        let r = convergence_time(&task, &[below, crossing, relapse], 0.01).unwrap();
        assert_eq!(r.converged_fraction, 2.0 / 3.0);
        assert_eq!(r.mean_convergence_time_s, Some(36.5));
        assert_eq!(r.first_crossing_fraction, 1.0);
        assert!(convergence_time(&task, &[], 0.0).is_err());
    }

    #[test]
    fn exports_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let traces: Vec<_> = (0..4).map(|i| synthetic(&[0.1 * i as f64 + 1.0 / 3.0, 0.2, 1e-17], 0.5)).collect();
        let stats = aggregate_envelope(&traces).unwrap();
        let reports: Vec<_> = TaskSpec::suite()
            .iter()
            .map(|t| convergence_time(t, &traces, t.threshold()).unwrap())
            .collect();
        export_results(dir.path(), &stats, &reports, &traces).unwrap();
        let back = read_envelope_csv(&dir.path().join("envelope.csv")).unwrap();
        assert_eq!(back, stats);
        let text = fs::read_to_string(dir.path().join("envelope.csv")).unwrap();
        assert_eq!(text.lines().count(), 2 + 3);
        let summary: Summary = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary.tasks.len(), 10);
        assert!(summary.tasks.contains_key("none:full") && summary.tasks.contains_key("x:y"));
        let trace = fs::read_to_string(dir.path().join("trace-0003.csv")).unwrap();
        assert!(trace.starts_with("step,time_s,q_s,q_x,q_y,q_z,error_rad,omega_x"));
        let missing = dir.path().join("no/such/dir/envelope.csv");
        assert!(matches!(write_envelope_csv(&missing, &stats), Err(EvalError::Io { .. })));
    }

    fn traces_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..6, 1usize..30).prop_flat_map(|(n, len)| prop::collection::vec(prop::collection::vec(0.0f64..3.2, len), n))
    }

    proptest! {
        #[test]
        fn envelope_dominance_and_permutation(cols in traces_strategy(), extra in prop::collection::vec(0.0f64..3.2, 30)) {
            let traces: Vec<_> = cols.iter().map(|e| synthetic(e, 0.5)).collect();
            let s = aggregate_envelope(&traces).unwrap();
            for k in 0..s.len() {
                prop_assert!(s.max[k] >= s.mean[k] && s.mean[k] >= 0.0 && s.std[k] >= 0.0);
            }
            let mut rev = traces.clone();
            rev.reverse();
            prop_assert_eq!(&aggregate_envelope(&rev).unwrap(), &s);
            let mut more = traces.clone();
            more.push(synthetic(&extra[..s.len()], 0.5));
            let s2 = aggregate_envelope(&more).unwrap();
            for k in 0..s.len() {
                prop_assert!(s2.max[k] >= s.max[k]);
            }
        }
    }
}
