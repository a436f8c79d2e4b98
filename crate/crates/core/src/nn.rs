//! Actor-critic multilayer perceptron with exact reverse-mode gradients.
//!
//! All parameters live in one flat vector, in declaration order:
//! actor layers (weights row-major `out × in`, then bias), the actor
//! log-standard-deviations, then critic layers. Gradients use the same
//! layout, which keeps the optimizer and checkpoint code trivial.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{ACT_DIM, OBS_DIM};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("input has {got} features, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite input feature")]
    NonFiniteInput,
    #[error("tape was recorded against different parameters (stale tape)")]
    StaleTape,
    #[error("buffer length {got} does not match parameter count {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { obs_dim: OBS_DIM, act_dim: ACT_DIM, hidden: vec![64, 64], activation: Activation::Tanh }
    }
}

impl Architecture {
    fn dims(&self, out: usize) -> Vec<usize> {
        let mut d = vec![self.obs_dim];
        d.extend(&self.hidden);
        d.push(out);
        d
    }

    /// `(inputs, outputs)` of every actor layer.
    pub fn actor_shapes(&self) -> Vec<(usize, usize)> {
        self.dims(self.act_dim).windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn critic_shapes(&self) -> Vec<(usize, usize)> {
        self.dims(1).windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        let dense = |shapes: Vec<(usize, usize)>| shapes.iter().map(|(i, o)| i * o + o).sum::<usize>();
        dense(self.actor_shapes()) + self.act_dim + dense(self.critic_shapes())
    }
}

/// Offsets of one dense stack inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct DenseLayout {
    shapes: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    len: usize,
}

impl DenseLayout {
    fn new(shapes: Vec<(usize, usize)>, start: usize) -> Self {
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut at = start;
        for (i, o) in &shapes {
            offsets.push(at);
            at += i * o + o;
        }
        Self { shapes, offsets, len: at - start }
    }

    fn output_dim(&self) -> usize {
        self.shapes.last().map(|s| s.1).unwrap_or(0)
    }

    /// Returns the activations of every layer; the last entry is the linear output.
    fn forward(&self, params: &[f64], input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.shapes.len());
        let n = self.shapes.len();
        for (k, (&(ins, outs), &off)) in self.shapes.iter().zip(&self.offsets).enumerate() {
            let x: &[f64] = if k == 0 { input } else { &acts[k - 1] };
            let w = &params[off..off + ins * outs];
            let b = &params[off + ins * outs..off + ins * outs + outs];
            let mut y: Vec<f64> = w.chunks_exact(ins).zip(b).map(|(row, bias)| dot(row, x) + bias).collect();
            if k + 1 < n {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(y);
        }
        acts
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂output`.
    fn backward(&self, params: &[f64], input: &[f64], acts: &[Vec<f64>], d_out: &[f64], grads: &mut [f64]) {
        let mut delta = d_out.to_vec();
        for k in (0..self.shapes.len()).rev() {
            let (ins, outs) = self.shapes[k];
            let off = self.offsets[k];
            let x: &[f64] = if k == 0 { input } else { &acts[k - 1] };
            {
                let (gw, gb) = grads[off..off + ins * outs + outs].split_at_mut(ins * outs);
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, xi) in gw[o * ins..(o + 1) * ins].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            if k == 0 {
                break;
            }
            let w = &params[off..off + ins * outs];
            let mut prev = vec![0.0; ins];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[o * ins..(o + 1) * ins]) {
                    *p += d * wi;
                }
            }
            // through tanh of the previous layer
            for (p, a) in prev.iter_mut().zip(x) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Diagonal Gaussian over normalized actions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPolicyOutput {
    pub mean: [f64; ACT_DIM],
    pub log_std: [f64; ACT_DIM],
}

impl GaussianPolicyOutput {
    pub fn std(&self) -> [f64; ACT_DIM] {
        self.log_std.map(f64::exp)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> [f64; ACT_DIM] {
        let std = self.std();
        let mut a = [0.0; ACT_DIM];
        for i in 0..ACT_DIM {
            let z: f64 = rng.sample(StandardNormal);
            a[i] = self.mean[i] + std[i] * z;
        }
        a
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|l| l + 0.5 * (2.0 * PI * std::f64::consts::E).ln()).sum()
    }
}

/// Diagonal-Gaussian log density.
pub fn log_prob(out: &GaussianPolicyOutput, action: &[f64; ACT_DIM]) -> f64 {
    let half_ln_2pi = 0.5 * (2.0 * PI).ln();
    (0..ACT_DIM)
        .map(|i| {
            let sigma = out.log_std[i].exp();
            let z = (action[i] - out.mean[i]) / sigma;
            -0.5 * z * z - out.log_std[i] - half_ln_2pi
        })
        .sum()
}

/// `∂ log π(a) / ∂ mean` and `∂ log π(a) / ∂ log_std`.
pub fn log_prob_grad(out: &GaussianPolicyOutput, action: &[f64; ACT_DIM]) -> ([f64; ACT_DIM], [f64; ACT_DIM]) {
    let mut d_mean = [0.0; ACT_DIM];
    let mut d_log_std = [0.0; ACT_DIM];
    for i in 0..ACT_DIM {
        let sigma = out.log_std[i].exp();
        let z = (action[i] - out.mean[i]) / sigma;
        d_mean[i] = z / sigma;
        d_log_std[i] = z * z - 1.0;
    }
    (d_mean, d_log_std)
}

/// Flat gradient aligned with the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer(pub Vec<f64>);

impl GradientBuffer {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn clear(&mut self) {
        self.0.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().for_each(|g| *g *= k);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }
}

/// Loss sensitivities with respect to the network heads.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Adjoint {
    /// With respect to the squashed action mean.
    pub d_mean: [f64; ACT_DIM],
    pub d_log_std: [f64; ACT_DIM],
    pub d_value: f64,
}

/// Activations recorded by [`MlpActorCritic::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTape {
    version: u64,
    input: Vec<f64>,
    actor: Vec<Vec<f64>>,
    critic: Vec<Vec<f64>>,
    pub policy: GaussianPolicyOutput,
    pub value: f64,
}

/// Separate actor (`obs → hidden → hidden → mean`) and critic
/// (`obs → hidden → hidden → value`) networks plus state-independent log-std.
#[derive(Debug, Clone)]
pub struct MlpActorCritic {
    arch: Architecture,
    params: Vec<f64>,
    actor: DenseLayout,
    log_std_offset: usize,
    critic: DenseLayout,
    version: u64,
}

impl PartialEq for MlpActorCritic {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

impl MlpActorCritic {
    /// Zero-parameter network with the given architecture (log-std at 0).
    pub fn zeros(arch: Architecture) -> Self {
        let actor = DenseLayout::new(arch.actor_shapes(), 0);
        let log_std_offset = actor.len;
        let critic = DenseLayout::new(arch.critic_shapes(), log_std_offset + arch.act_dim);
        let params = vec![0.0; arch.param_count()];
        Self { arch, params, actor, log_std_offset, critic, version: 0 }
    }

    /// Orthogonal init: gain √2 on hidden layers, 0.01 on output layers,
    /// zero biases, log-std at ln 0.5.
    pub fn new(arch: Architecture, rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(arch);
        for layout in [net.actor.clone(), net.critic.clone()] {
            let n = layout.shapes.len();
            for (k, (&(ins, outs), &off)) in layout.shapes.iter().zip(&layout.offsets).enumerate() {
                let gain = if k + 1 == n { 0.01 } else { 2f64.sqrt() };
                let w = orthogonal(outs, ins, gain, rng);
                net.params[off..off + ins * outs].copy_from_slice(&w);
            }
        }
        let off = net.log_std_offset;
        net.params[off..off + net.arch.act_dim].iter_mut().for_each(|l| *l = 0.5f64.ln());
        net
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self, NnError> {
        let mut net = Self::zeros(arch);
        if params.len() != net.params.len() {
            return Err(NnError::LengthMismatch { expected: net.params.len(), got: params.len() });
        }
        net.params = params;
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access; invalidates previously recorded tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Index range of the actor weights, log-std and critic weights.
    pub fn actor_range(&self) -> std::ops::Range<usize> {
        0..self.log_std_offset + self.arch.act_dim
    }

    pub fn critic_range(&self) -> std::ops::Range<usize> {
        self.critic.offsets[0]..self.critic.offsets[0] + self.critic.len
    }

    /// Offset of the last (output) layer of the actor and critic.
    pub fn output_layer_ranges(&self) -> [std::ops::Range<usize>; 2] {
        let r = |l: &DenseLayout| {
            let k = l.shapes.len() - 1;
            let (i, o) = l.shapes[k];
            l.offsets[k]..l.offsets[k] + i * o + o
        };
        [r(&self.actor), r(&self.critic)]
    }

    pub fn log_std(&self) -> [f64; ACT_DIM] {
        let mut out = [0.0; ACT_DIM];
        for (o, p) in out.iter_mut().zip(&self.params[self.log_std_offset..]) {
            *o = p.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
        out
    }

    /// Keeps log-std parameters within `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn clamp_log_std(&mut self) {
        let off = self.log_std_offset;
        let n = self.arch.act_dim;
        self.params_mut()[off..off + n].iter_mut().for_each(|l| *l = l.clamp(LOG_STD_MIN, LOG_STD_MAX));
    }

    fn check_input(&self, obs: &[f64]) -> Result<(), NnError> {
        if obs.len() != self.arch.obs_dim {
            return Err(NnError::DimMismatch { expected: self.arch.obs_dim, got: obs.len() });
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteInput);
        }
        Ok(())
    }

    fn policy_from_actor(&self, pre: &[f64]) -> GaussianPolicyOutput {
        let mut mean = [0.0; ACT_DIM];
        for (m, p) in mean.iter_mut().zip(pre) {
            *m = p.tanh();
        }
        GaussianPolicyOutput { mean, log_std: self.log_std() }
    }

    pub fn policy_forward(&self, obs: &[f64]) -> Result<GaussianPolicyOutput, NnError> {
        self.check_input(obs)?;
        let acts = self.actor.forward(&self.params, obs);
        Ok(self.policy_from_actor(acts.last().expect("non-empty stack")))
    }

    pub fn value_forward(&self, obs: &[f64]) -> Result<f64, NnError> {
        self.check_input(obs)?;
        let acts = self.critic.forward(&self.params, obs);
        Ok(acts.last().expect("non-empty stack")[0])
    }

    /// Runs both heads and records activations for [`Self::backward`].
    pub fn forward(&self, obs: &[f64]) -> Result<ForwardTape, NnError> {
        self.check_input(obs)?;
        let actor = self.actor.forward(&self.params, obs);
        let critic = self.critic.forward(&self.params, obs);
        let policy = self.policy_from_actor(actor.last().expect("non-empty stack"));
        let value = critic.last().expect("non-empty stack")[0];
        Ok(ForwardTape { version: self.version, input: obs.to_vec(), actor, critic, policy, value })
    }

    /// Accumulates parameter gradients of a scalar loss whose sensitivities to
    /// the heads are `adj`.
    pub fn backward(&self, tape: &ForwardTape, adj: &Adjoint, grads: &mut GradientBuffer) -> Result<(), NnError> {
        if tape.version != self.version {
            return Err(NnError::StaleTape);
        }
        if grads.0.len() != self.params.len() {
            return Err(NnError::LengthMismatch { expected: self.params.len(), got: grads.0.len() });
        }
        let mut d_pre = vec![0.0; self.actor.output_dim()];
        for (i, d) in d_pre.iter_mut().enumerate() {
            let m = tape.policy.mean[i];
            *d = adj.d_mean[i] * (1.0 - m * m);
        }
        self.actor.backward(&self.params, &tape.input, &tape.actor, &d_pre, &mut grads.0);
        for i in 0..self.arch.act_dim {
            let raw = self.params[self.log_std_offset + i];
            // clamp has zero slope outside its range
            if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                grads.0[self.log_std_offset + i] += adj.d_log_std[i];
            }
        }
        self.critic.backward(&self.params, &tape.input, &tape.critic, &[adj.d_value], &mut grads.0);
        Ok(())
    }
}

/// `rows × cols` matrix with orthonormal rows (or columns), scaled by `gain`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Vec<f64> {
    // Orthonormalize the shorter dimension's vectors in the longer space.
    let (n, dim) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut w = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            w[r * cols + c] = gain * if rows <= cols { basis[r][c] } else { basis[c][r] };
        }
    }
    w
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, params: &mut [f64], grads: &GradientBuffer) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.0.len() != self.m.len() {
            return Err(NnError::LengthMismatch { expected: self.m.len(), got: params.len().min(grads.0.len()) });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
