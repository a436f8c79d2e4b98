//! Proximal policy optimization: rollout collection over a pool of
//! environments, generalized advantage estimation, clipped-surrogate updates
//! gated by a KL target, and multi-seed training with best-agent selection.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError, CheckpointMeta};
use crate::dynamics::SatelliteParams;
use crate::env::{Action, AttitudeEnv, EnvError, EpisodeConfig, RewardConfig, TaskSpec, ACT_DIM, OBS_DIM};
use crate::nn::{log_prob, log_prob_grad, Adam, Adjoint, Architecture, GradientBuffer, MlpActorCritic, NnError};
use crate::rng::{derive_seed, seeded, SimRng};

const STREAM_INIT: u64 = 1;
const STREAM_ENV: u64 = 2;
const STREAM_ACTION: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

/// Consecutive numerically failed episodes tolerated before collection gives up.
const MAX_DISCARDED_EPISODES: usize = 1000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid hyperparameter `{field}`: {reason}")]
    InvalidHyperparam { field: &'static str, reason: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("all {0} seeds failed")]
    AllSeedsFailed(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Optimizer and schedule settings.
///
/// `batch_size` is the window length: each update sweep walks the epoch
/// buffer in consecutive windows of that many transitions and optimizes every
/// window in shuffled minibatches of `minibatch_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default = "Hyperparams::desk")]
pub struct Hyperparams {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub kl_target: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub minibatch_size: usize,
    pub clip_epsilon: f64,
    pub update_passes: usize,
    pub steps_per_epoch: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: Option<f64>,
    /// Parallel environments per seed.
    pub n_envs: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            kl_target: 0.035,
            epochs: 40,
            lr: 3e-4,
            batch_size: 150,
            minibatch_size: 32,
            clip_epsilon: 0.2,
            update_passes: 10,
            steps_per_epoch: 15_000,
            value_coef: 0.5,
            entropy_coef: 0.0,
            max_grad_norm: None,
            n_envs: 5,
        }
    }
}

impl Hyperparams {
    /// Table values with a 10-epoch schedule; fills omitted config keys.
    pub fn desk() -> Self {
        Self { epochs: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, reason: &str| Err(TrainError::InvalidHyperparam { field, reason: reason.into() });
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", "must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda", "must lie in [0, 1]");
        }
        if !(self.kl_target > 0.0) {
            return bad("kl_target", "must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if self.minibatch_size == 0 || self.batch_size == 0 {
            return bad("minibatch_size", "batch and minibatch sizes must be positive");
        }
        if self.minibatch_size > self.batch_size {
            return bad("minibatch_size", "must not exceed batch_size");
        }
        if !(self.clip_epsilon > 0.0) {
            return bad("clip_epsilon", "must be positive");
        }
        if self.update_passes == 0 {
            return bad("update_passes", "must be positive");
        }
        if self.n_envs == 0 {
            return bad("n_envs", "must be positive");
        }
        if self.steps_per_epoch < self.n_envs {
            return bad("steps_per_epoch", "must be at least n_envs");
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef >= 0.0) {
            return bad("value_coef", "loss coefficients must be non-negative");
        }
        if let Some(g) = self.max_grad_norm {
            if !(g > 0.0) {
                return bad("max_grad_norm", "must be positive when set");
            }
        }
        Ok(())
    }
}

/// Everything needed to train one controller.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub params: SatelliteParams,
    pub task: TaskSpec,
    pub reward: RewardConfig,
    pub episode: EpisodeConfig,
    pub hp: Hyperparams,
    pub arch: Architecture,
    /// Stored in checkpoints for provenance.
    pub config_hash: Option<String>,
}

impl TrainSetup {
    pub fn for_task(task: TaskSpec) -> Self {
        Self {
            params: SatelliteParams::default(),
            task,
            reward: RewardConfig::for_task(&task),
            episode: EpisodeConfig { horizon: task.default_horizon(), ..EpisodeConfig::default() },
            hp: Hyperparams::default(),
            arch: Architecture::default(),
            config_hash: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.params.validate().map_err(EnvError::from)?;
        self.reward.validate()?;
        self.episode.validate()?;
        self.hp.validate()
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta { task: Some(self.task.id()), config_hash: self.config_hash.clone() }
    }
}

/// Contiguous run of transitions collected by one environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    /// Value of the observation following the last transition (0 when it ended an episode).
    pub bootstrap_value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub obs: Vec<[f64; OBS_DIM]>,
    /// Unclamped samples from the policy.
    pub actions: Vec<[f64; ACT_DIM]>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub segments: Vec<Segment>,
    /// Undiscounted returns of episodes completed during collection.
    pub episode_returns: Vec<f64>,
    pub episode_lengths: Vec<usize>,
    /// Per-transition environment reward, before time-limit bootstrapping.
    pub raw_rewards: Vec<f64>,
    pub rate_violations: usize,
    pub discarded_episodes: usize,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    fn truncate(&mut self, n: usize) {
        self.obs.truncate(n);
        self.actions.truncate(n);
        self.log_probs.truncate(n);
        self.rewards.truncate(n);
        self.raw_rewards.truncate(n);
        self.values.truncate(n);
        self.dones.truncate(n);
    }

    fn append(&mut self, mut other: RolloutBuffer) {
        let offset = self.len();
        self.obs.append(&mut other.obs);
        self.actions.append(&mut other.actions);
        self.log_probs.append(&mut other.log_probs);
        self.rewards.append(&mut other.rewards);
        self.raw_rewards.append(&mut other.raw_rewards);
        self.values.append(&mut other.values);
        self.dones.append(&mut other.dones);
        self.segments.extend(other.segments.iter().map(|s| Segment {
            start: s.start + offset,
            end: s.end + offset,
            bootstrap_value: s.bootstrap_value,
        }));
        self.episode_returns.append(&mut other.episode_returns);
        self.episode_lengths.append(&mut other.episode_lengths);
        self.rate_violations += other.rate_violations;
        self.discarded_episodes += other.discarded_episodes;
    }
}

/// GAE over one segment.
///
/// `A_t = δ_t + γλ(1 − d_t) A_{t+1}`, `δ_t = r_t + γ(1 − d_t) V_{t+1} − V_t`,
/// with `V_{T}` = `last_value`. Returns `(advantages, returns)`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * next_value - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

pub fn compute_gae(buffer: &mut RolloutBuffer, gamma: f64, lambda: f64) {
    buffer.advantages = vec![0.0; buffer.len()];
    buffer.returns = vec![0.0; buffer.len()];
    for seg in buffer.segments.clone() {
        let r = seg.start..seg.end;
        let (adv, ret) = gae(
            &buffer.rewards[r.clone()],
            &buffer.values[r.clone()],
            &buffer.dones[r.clone()],
            seg.bootstrap_value,
            gamma,
            lambda,
        );
        buffer.advantages[r.clone()].copy_from_slice(&adv);
        buffer.returns[r].copy_from_slice(&ret);
    }
}

/// Shifts and scales advantages to zero mean and unit population variance.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a -= mean;
        if std > 0.0 {
            *a /= std;
        }
    }
}

/// One environment plus its action-sampling stream.
#[derive(Debug, Clone)]
pub struct RolloutWorker {
    pub env: AttitudeEnv,
    pub rng: SimRng,
}

impl RolloutWorker {
    fn collect(&mut self, net: &MlpActorCritic, quota: usize, progress: f64, gamma: f64) -> Result<RolloutBuffer, TrainError> {
        let params = *self.env.params();
        let mut buf = RolloutBuffer::default();
        let mut obs = self.env.reset(progress);
        let mut episode_start = 0;
        let mut episode_return = 0.0;
        let mut consecutive_failures = 0;
        while buf.len() < quota {
            let features = obs.features(&params);
            let policy = net.policy_forward(&features)?;
            let value = net.value_forward(&features)?;
            let action = policy.sample(&mut self.rng);
            let lp = log_prob(&policy, &action);
            match self.env.step(Action(action)) {
                Ok(out) => {
                    consecutive_failures = 0;
                    let mut reward = out.reward;
                    if out.info.truncated {
                        // time limit, not a terminal state: fold in the tail value
                        reward += gamma * net.value_forward(&out.observation.features(&params))?;
                    }
                    buf.obs.push(features);
                    buf.actions.push(action);
                    buf.log_probs.push(lp);
                    buf.rewards.push(reward);
                    buf.raw_rewards.push(out.reward);
                    buf.values.push(value);
                    buf.dones.push(out.done);
                    episode_return += out.reward;
                    if out.done {
                        buf.episode_returns.push(episode_return);
                        buf.episode_lengths.push(buf.len() - episode_start);
                        if out.info.rate_violation {
                            buf.rate_violations += 1;
                        }
                        episode_return = 0.0;
                        episode_start = buf.len();
                        obs = self.env.reset(progress);
                    } else {
                        obs = out.observation;
                    }
                }
                Err(EnvError::Dynamics(e)) => {
                    warn!("discarding episode after numerical failure: {e}");
                    buf.truncate(episode_start);
                    buf.discarded_episodes += 1;
                    consecutive_failures += 1;
                    if consecutive_failures > MAX_DISCARDED_EPISODES {
                        return Err(TrainError::Numerical(format!("{consecutive_failures} consecutive episodes failed")));
                    }
                    episode_return = 0.0;
                    obs = self.env.reset(progress);
                }
                Err(e) => return Err(e.into()),
            }
        }
        let bootstrap_value = if buf.dones.last() == Some(&true) {
            0.0
        } else {
            net.value_forward(&obs.features(&params))?
        };
        buf.segments.push(Segment { start: 0, end: buf.len(), bootstrap_value });
        Ok(buf)
    }
}

/// Builds one worker per environment with streams derived from `seed`.
pub fn make_workers(setup: &TrainSetup, seed: u64) -> Result<Vec<RolloutWorker>, TrainError> {
    (0..setup.hp.n_envs)
        .map(|i| {
            let env = AttitudeEnv::new(
                setup.params,
                setup.task,
                setup.reward,
                setup.episode,
                derive_seed(seed, &[STREAM_ENV, i as u64]),
            )?;
            Ok(RolloutWorker { env, rng: seeded(seed, &[STREAM_ACTION, i as u64]) })
        })
        .collect()
}

/// Collects exactly `n_steps` transitions split across the workers, in
/// worker order. Episodes restart on termination; every worker starts from a
/// fresh reset.
pub fn collect_rollouts(
    workers: &mut [RolloutWorker],
    net: &MlpActorCritic,
    n_steps: usize,
    progress: f64,
    gamma: f64,
) -> Result<RolloutBuffer, TrainError> {
    let n = workers.len().max(1);
    let quotas: Vec<usize> = (0..workers.len()).map(|i| n_steps / n + usize::from(i < n_steps % n)).collect();
    let parts: Vec<Result<RolloutBuffer, TrainError>> = workers
        .par_iter_mut()
        .zip(quotas.par_iter())
        .map(|(w, &q)| w.collect(net, q, progress, gamma))
        .collect();
    let mut buf = RolloutBuffer::default();
    for part in parts {
        buf.append(part?);
    }
    Ok(buf)
}

/// Clipped surrogate for one sample: returns `(loss, ∂loss/∂log π)` with
/// `loss = −min(ρA, clip(ρ, 1 − ε, 1 + ε)A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    if unclipped <= clipped {
        (-unclipped, -unclipped)
    } else {
        (-clipped, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub passes: usize,
    pub kl_gate_fired: bool,
    /// Mean sampled KL after the last applied pass.
    pub mean_kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub aborted: bool,
}

fn mean_sampled_kl(buffer: &RolloutBuffer, net: &MlpActorCritic) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for ((obs, action), old) in buffer.obs.iter().zip(&buffer.actions).zip(&buffer.log_probs) {
        let p = net.policy_forward(obs)?;
        total += old - log_prob(&p, action);
    }
    Ok(total / buffer.len().max(1) as f64)
}

/// Clipped-surrogate optimization over a buffer whose advantages are already
/// computed and normalized. On a non-finite loss the network and optimizer
/// are restored to their state at entry.
pub fn ppo_update(
    buffer: &RolloutBuffer,
    net: &mut MlpActorCritic,
    opt: &mut Adam,
    hp: &Hyperparams,
    rng: &mut SimRng,
) -> Result<UpdateStats, TrainError> {
    let saved_params = net.params().to_vec();
    let saved_opt = opt.clone();
    let n = buffer.len();
    let mut grads = GradientBuffer::zeros(net.param_count());
    let mut stats = UpdateStats::default();
    if n == 0 {
        return Ok(stats);
    }

    for _ in 0..hp.update_passes {
        let (mut pl_sum, mut vl_sum, mut ent_sum, mut clipped, mut count) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for window_start in (0..n).step_by(hp.batch_size) {
            let mut idx: Vec<usize> = (window_start..(window_start + hp.batch_size).min(n)).collect();
            idx.shuffle(rng);
            for mb in idx.chunks(hp.minibatch_size) {
                grads.clear();
                let m = mb.len() as f64;
                for &i in mb {
                    let tape = net.forward(&buffer.obs[i])?;
                    let new_lp = log_prob(&tape.policy, &buffer.actions[i]);
                    let ratio = (new_lp - buffer.log_probs[i]).exp();
                    let (pl, d_logp) = clipped_surrogate(ratio, buffer.advantages[i], hp.clip_epsilon);
                    let err = tape.value - buffer.returns[i];
                    let vl = hp.value_coef * err * err;
                    let entropy = tape.policy.entropy();
                    if !(pl.is_finite() && vl.is_finite()) {
                        net.params_mut().copy_from_slice(&saved_params);
                        *opt = saved_opt;
                        warn!("non-finite loss; update aborted and parameters restored");
                        stats.aborted = true;
                        return Ok(stats);
                    }
                    if (ratio - 1.0).abs() > hp.clip_epsilon {
                        clipped += 1;
                    }
                    pl_sum += pl;
                    vl_sum += vl;
                    ent_sum += entropy;
                    count += 1;

                    let (d_mean, d_log_std) = log_prob_grad(&tape.policy, &buffer.actions[i]);
                    let mut adj = Adjoint { d_value: 2.0 * hp.value_coef * err / m, ..Default::default() };
                    for k in 0..ACT_DIM {
                        adj.d_mean[k] = d_logp * d_mean[k] / m;
                        adj.d_log_std[k] = (d_logp * d_log_std[k] - hp.entropy_coef) / m;
                    }
                    net.backward(&tape, &adj, &mut grads)?;
                }
                if !grads.is_finite() {
                    net.params_mut().copy_from_slice(&saved_params);
                    *opt = saved_opt;
                    warn!("non-finite gradient; update aborted and parameters restored");
                    stats.aborted = true;
                    return Ok(stats);
                }
                if let Some(max) = hp.max_grad_norm {
                    let norm = grads.norm();
                    if norm > max {
                        grads.scale(max / norm);
                    }
                }
                opt.update(net.params_mut(), &grads)?;
                net.clamp_log_std();
            }
        }
        stats.passes += 1;
        let c = count.max(1) as f64;
        stats.policy_loss = pl_sum / c;
        stats.value_loss = vl_sum / c;
        stats.entropy = ent_sum / c;
        stats.clip_fraction = clipped as f64 / c;
        stats.mean_kl = mean_sampled_kl(buffer, net)?;
        if stats.mean_kl > hp.kl_target {
            stats.kl_gate_fired = true;
            break;
        }
    }
    Ok(stats)
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub progress: f64,
    pub steps: usize,
    pub episodes: usize,
    /// Mean undiscounted return of the episodes completed this epoch.
    pub cumulative_reward: f64,
    pub mean_step_reward: f64,
    pub mean_episode_length: f64,
    pub rate_violations: usize,
    pub discarded_episodes: usize,
    pub update_passes: usize,
    pub kl_gate_fired: bool,
    pub mean_kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub mean_std: f64,
    pub update_aborted: bool,
    /// Excluded from the CSV so that reruns produce identical files.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

pub fn write_stats_header(path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(STATS_COLUMNS).map_err(|e| csv_err(path, e))?;
    w.flush().map_err(io_err(path))
}

const STATS_COLUMNS: [&str; 18] = [
    "epoch",
    "progress",
    "steps",
    "episodes",
    "cumulative_reward",
    "mean_step_reward",
    "mean_episode_length",
    "rate_violations",
    "discarded_episodes",
    "update_passes",
    "kl_gate_fired",
    "mean_kl",
    "policy_loss",
    "value_loss",
    "entropy",
    "clip_fraction",
    "mean_std",
    "update_aborted",
];

fn csv_err(path: &Path, e: csv::Error) -> TrainError {
    TrainError::Io { path: path.to_path_buf(), source: std::io::Error::other(e.to_string()) }
}

pub fn append_stats(path: &Path, row: &EpochStats) -> Result<(), TrainError> {
    let file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.serialize(row).map_err(|e| csv_err(path, e))?;
    w.flush().map_err(io_err(path))
}

pub fn read_stats(path: &Path) -> Result<Vec<EpochStats>, TrainError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub seed: u64,
    pub stats: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best: Checkpoint,
    pub last: Checkpoint,
}

impl TrainOutcome {
    pub fn best_reward(&self) -> f64 {
        self.stats[self.best_epoch].cumulative_reward
    }
}

/// Trains one controller. With `out_dir`, writes `epoch-NNN.ckpt` after every
/// epoch, `stats.csv` (one row per epoch) and `best.ckpt`.
pub fn train_controller(setup: &TrainSetup, seed: u64, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    setup.validate()?;
    let hp = &setup.hp;
    let mut net = MlpActorCritic::new(setup.arch.clone(), &mut seeded(seed, &[STREAM_INIT]));
    let mut opt = Adam::new(net.param_count(), hp.lr);
    let mut shuffle_rng = seeded(seed, &[STREAM_SHUFFLE]);
    let mut workers = make_workers(setup, seed)?;
    let stats_path = out_dir.map(|d| d.join("stats.csv"));
    if let (Some(dir), Some(p)) = (out_dir, &stats_path) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_stats_header(p)?;
    }

    let mut stats = Vec::with_capacity(hp.epochs);
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    for epoch in 0..hp.epochs {
        let started = Instant::now();
        let progress = epoch as f64 / hp.epochs as f64;
        let mut buffer = collect_rollouts(&mut workers, &net, hp.steps_per_epoch, progress, hp.gamma)?;
        compute_gae(&mut buffer, hp.gamma, hp.gae_lambda);
        normalize_advantages(&mut buffer.advantages);
        // The network that collected this epoch's rollouts earned its reward.
        let collected_with = net.clone();
        let update = ppo_update(&buffer, &mut net, &mut opt, hp, &mut shuffle_rng)?;

        let episodes = buffer.episode_returns.len();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let lengths: Vec<f64> = buffer.episode_lengths.iter().map(|&l| l as f64).collect();
        let row = EpochStats {
            epoch,
            progress,
            steps: buffer.len(),
            episodes,
            cumulative_reward: mean(&buffer.episode_returns),
            mean_step_reward: mean(&buffer.raw_rewards),
            mean_episode_length: mean(&lengths),
            rate_violations: buffer.rate_violations,
            discarded_episodes: buffer.discarded_episodes,
            update_passes: update.passes,
            kl_gate_fired: update.kl_gate_fired,
            mean_kl: update.mean_kl,
            policy_loss: update.policy_loss,
            value_loss: update.value_loss,
            entropy: update.entropy,
            clip_fraction: update.clip_fraction,
            mean_std: net.log_std().iter().map(|l| l.exp()).sum::<f64>() / ACT_DIM as f64,
            update_aborted: update.aborted,
            wall_clock_s: started.elapsed().as_secs_f64(),
        };
        info!(
            "task {} seed {seed} epoch {epoch}: return {:.2}, step reward {:.3}, kl {:.4}, passes {}",
            setup.task.id(),
            row.cumulative_reward,
            row.mean_step_reward,
            row.mean_kl,
            row.update_passes
        );
        if let Some(p) = &stats_path {
            append_stats(p, &row)?;
        }
        let ckpt = Checkpoint::new(net.clone(), setup.meta());
        if let Some(dir) = out_dir {
            ckpt.save(&dir.join(format!("epoch-{epoch:03}.ckpt")))?;
        }
        if row.episodes > 0 && best.as_ref().is_none_or(|(_, r, _)| row.cumulative_reward > *r) {
            best = Some((epoch, row.cumulative_reward, Checkpoint::new(collected_with, setup.meta())));
        }
        stats.push(row);
    }

    let last = Checkpoint::new(net, setup.meta());
    let (best_epoch, _, best) = best.unwrap_or((hp.epochs - 1, f64::NAN, last.clone()));
    if let Some(dir) = out_dir {
        best.save(&dir.join("best.ckpt"))?;
    }
    Ok(TrainOutcome { seed, stats, best_epoch, best, last })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub best_reward: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub best_seed: u64,
    pub best: Checkpoint,
    pub outcomes: Vec<TrainOutcome>,
    pub per_seed: Vec<SeedSummary>,
    /// Mean and population variance of the per-seed best rewards.
    pub mean_best_reward: f64,
    pub var_best_reward: f64,
}

/// Mean and population variance.
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Index of the best `(seed, reward)` pair; ties go to the smaller seed so
/// the choice does not depend on input order.
pub fn select_best(candidates: &[(u64, f64)]) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, (_, r))| r.is_finite())
        .max_by(|(_, a), (_, b)| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
}

/// Trains one controller per seed (in parallel) and keeps the checkpoint with
/// the highest best-epoch reward. Seeds that fail are reported and skipped.
pub fn multi_seed_select(setup: &TrainSetup, seeds: &[u64], out_dir: Option<&Path>) -> Result<Selection, TrainError> {
    setup.validate()?;
    let results: Vec<(u64, Result<TrainOutcome, TrainError>)> = seeds
        .par_iter()
        .map(|&seed| {
            let dir = out_dir.map(|d| d.join(format!("seed-{seed}")));
            (seed, train_controller(setup, seed, dir.as_deref()))
        })
        .collect();

    let mut per_seed = Vec::with_capacity(results.len());
    let mut outcomes = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(o) => {
                per_seed.push(SeedSummary {
                    seed,
                    best_epoch: Some(o.best_epoch),
                    best_reward: Some(o.best_reward()),
                    error: None,
                });
                outcomes.push(o);
            }
            Err(e) => {
                warn!("seed {seed} failed: {e}");
                per_seed.push(SeedSummary { seed, best_epoch: None, best_reward: None, error: Some(e.to_string()) });
            }
        }
    }
    let candidates: Vec<(u64, f64)> = outcomes.iter().map(|o| (o.seed, o.best_reward())).collect();
    let Some(i) = select_best(&candidates) else {
        return Err(TrainError::AllSeedsFailed(seeds.len()));
    };
    let rewards: Vec<f64> = candidates.iter().map(|c| c.1).collect();
    let (mean_best_reward, var_best_reward) = mean_and_variance(&rewards);
    debug!("selected seed {} with reward {}", candidates[i].0, candidates[i].1);
    Ok(Selection {
        best_seed: outcomes[i].seed,
        best: outcomes[i].best.clone(),
        outcomes,
        per_seed,
        mean_best_reward,
        var_best_reward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_setup() -> TrainSetup {
        let mut s = TrainSetup::for_task(TaskSpec::nominal());
        s.hp.epochs = 2;
        s.hp.steps_per_epoch = 600;
        s.hp.n_envs = 2;
        s.hp.update_passes = 2;
        s.episode.horizon = 40;
        s.episode.substeps = 10;
        s
    }

    #[test]
    fn single_terminal_step() {
        let (adv, ret) = gae(&[1.0], &[0.0], &[true], 5.0, 0.99, 0.95);
        assert_eq!(adv, vec![1.0]);
        assert_eq!(ret, vec![1.0]);
    }

    #[test]
    fn lambda_one_gives_monte_carlo_advantage() {
        let r = [1.0, -0.5, 2.0];
        let v = [0.3, 0.1, -0.2];
        let (adv, _) = gae(&r, &v, &[false, false, true], 9.0, 1.0, 1.0);
        assert!((adv[0] - (2.5 - 0.3)).abs() < 1e-12);
        assert!((adv[1] - (1.5 - 0.1)).abs() < 1e-12);
        assert!((adv[2] - (2.0 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_gives_td_error() {
        let r = [1.0, 2.0];
        let v = [0.5, 0.25];
        let (adv, _) = gae(&r, &v, &[false, false], 4.0, 0.9, 0.0);
        assert!((adv[0] - (1.0 + 0.9 * 0.25 - 0.5)).abs() < 1e-12);
        assert!((adv[1] - (2.0 + 0.9 * 4.0 - 0.25)).abs() < 1e-12);
    }

    #[test]
    fn done_blocks_bootstrap_across_episodes() {
        let (a, _) = gae(&[0.0, 0.0], &[0.0, 100.0], &[true, false], 0.0, 0.99, 0.95);
        assert_eq!(a[0], 0.0);
    }

    #[test]
    fn normalization_is_population_standardization() {
        let mut a = vec![1.0, 2.0, 3.0, 4.0];
        normalize_advantages(&mut a);
        let mean: f64 = a.iter().sum::<f64>() / 4.0;
        let var: f64 = a.iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        let mut z = vec![0.0; 5];
        normalize_advantages(&mut z);
        assert_eq!(z, vec![0.0; 5]);
    }

    #[test]
    fn unit_ratio_surrogate_is_negative_advantage() {
        let advs = [0.7, -1.3, 2.0, 0.0];
        let loss: f64 = advs.iter().map(|&a| clipped_surrogate(1.0, a, 0.2).0).sum::<f64>() / 4.0;
        let mean: f64 = advs.iter().sum::<f64>() / 4.0;
        assert!((loss + mean).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn surrogate_is_bounded_by_both_branches(ratio in 0.0f64..5.0, adv in -10.0f64..10.0, eps in 0.01f64..0.5) {
            let (loss, grad) = clipped_surrogate(ratio, adv, eps);
            let objective = -loss;
            prop_assert!(objective <= ratio * adv + 1e-12);
            prop_assert!(objective <= ratio.clamp(1.0 - eps, 1.0 + eps) * adv + 1e-12);
            if (ratio > 1.0 + eps && adv > 0.0) || (ratio < 1.0 - eps && adv < 0.0) {
                prop_assert_eq!(grad, 0.0);
            }
        }
    }

    fn synthetic_buffer(net: &MlpActorCritic, n: usize, adv: f64, logp_offset: f64) -> RolloutBuffer {
        let mut rng = seeded(5, &[]);
        let mut b = RolloutBuffer::default();
        for i in 0..n {
            let mut obs = [0.0; OBS_DIM];
            for (k, o) in obs.iter_mut().enumerate() {
                *o = ((i * 7 + k) as f64 * 0.37).sin();
            }
            let p = net.policy_forward(&obs).unwrap();
            let a = p.sample(&mut rng);
            b.obs.push(obs);
            b.actions.push(a);
            b.log_probs.push(log_prob(&p, &a) + logp_offset);
            b.rewards.push(0.0);
            b.values.push(0.0);
            b.dones.push(false);
            b.advantages.push(adv);
            b.returns.push(net.value_forward(&obs).unwrap() + 1.0);
        }
        b
    }

    #[test]
    fn zero_advantages_leave_policy_untouched() {
        let net0 = MlpActorCritic::new(Architecture::default(), &mut seeded(1, &[]));
        let mut net = net0.clone();
        let buf = synthetic_buffer(&net, 300, 0.0, 0.0);
        let mut opt = Adam::new(net.param_count(), 3e-4);
        let hp = Hyperparams { update_passes: 2, ..Hyperparams::default() };
        ppo_update(&buf, &mut net, &mut opt, &hp, &mut seeded(2, &[])).unwrap();
        let actor = net0.actor_range().start..net0.critic_range().start;
        assert_eq!(&net.params()[actor.clone()], &net0.params()[actor]);
        assert_ne!(&net.params()[net0.critic_range()], &net0.params()[net0.critic_range()]);
    }

    #[test]
    fn kl_gate_stops_early() {
        let mut net = MlpActorCritic::new(Architecture::default(), &mut seeded(1, &[]));
        let buf = synthetic_buffer(&net, 300, 1.0, 0.5);
        let mut opt = Adam::new(net.param_count(), 3e-4);
        let hp = Hyperparams::default();
        let stats = ppo_update(&buf, &mut net, &mut opt, &hp, &mut seeded(2, &[])).unwrap();
        assert!(stats.kl_gate_fired);
        assert!(stats.passes < hp.update_passes);
        assert!(stats.mean_kl > hp.kl_target);
    }

    #[test]
    fn non_finite_loss_restores_state() {
        let mut net = MlpActorCritic::new(Architecture::default(), &mut seeded(1, &[]));
        let before = net.params().to_vec();
        let mut buf = synthetic_buffer(&net, 150, 1.0, 0.0);
        buf.returns[40] = f64::NAN;
        let mut opt = Adam::new(net.param_count(), 3e-4);
        let stats = ppo_update(&buf, &mut net, &mut opt, &Hyperparams::default(), &mut seeded(2, &[])).unwrap();
        assert!(stats.aborted);
        assert_eq!(net.params(), &before[..]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn rollouts_have_exact_length_and_are_reproducible() {
        let setup = tiny_setup();
        let net = MlpActorCritic::new(setup.arch.clone(), &mut seeded(3, &[]));
        let run = || {
            let mut w = make_workers(&setup, 11).unwrap();
            collect_rollouts(&mut w, &net, 601, 0.0, 0.99).unwrap()
        };
        let a = run();
        assert_eq!(a.len(), 601);
        assert_eq!(a.segments.len(), 2);
        assert_eq!((a.segments[0].end, a.segments[1].start, a.segments[1].end), (301, 301, 601));
        assert!(a.episode_lengths.iter().all(|&l| l <= 40));
        assert_eq!(a, run());
    }

    #[test]
    fn training_writes_artifacts_and_repeats_exactly() {
        let setup = tiny_setup();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let o1 = train_controller(&setup, 9, Some(d1.path())).unwrap();
        let o2 = train_controller(&setup, 9, Some(d2.path())).unwrap();
        let csv1 = fs::read(d1.path().join("stats.csv")).unwrap();
        assert_eq!(csv1, fs::read(d2.path().join("stats.csv")).unwrap());
        assert_eq!(o1.best.param_hash(), o2.best.param_hash());
        assert!(d1.path().join("epoch-000.ckpt").exists() && d1.path().join("epoch-001.ckpt").exists());
        assert!(d1.path().join("best.ckpt").exists());
        let rows = read_stats(&d1.path().join("stats.csv")).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].steps, 600);
        assert_eq!(rows[1].cumulative_reward, o1.stats[1].cumulative_reward);
    }

    #[test]
    fn selection_is_order_independent() {
        let c = [(3, 1.0), (1, 5.0), (7, 5.0), (2, f64::NAN)];
        assert_eq!(c[select_best(&c).unwrap()].0, 1);
        let mut rev = c;
        rev.reverse();
        assert_eq!(rev[select_best(&rev).unwrap()].0, 1);
        assert_eq!(select_best(&[(1, f64::NAN)]), None);
        let (m, v) = mean_and_variance(&[1.0, 2.0, 3.0, 6.0]);
        assert_eq!((m, v), (3.0, 3.5));
    }
}
