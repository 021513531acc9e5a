//! PPO over one-step episodes with an elite-buffer observation, confidence
//! early exit and chunked restarts.
//!
//! Every episode is a single eval, so the advantage of a sample is its
//! scaled reward minus the value estimate taken when it was drawn.

use std::f64::consts::PI;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::SearchEnv;
use crate::error::{PolicyError, SearchError};
use crate::policy::{
    all_confident, build_observation, log_prob, sample, EliteBuffer, ForwardCache, NetConfig, PolicyOutput,
    PolicyParams,
};
use crate::search::SearchReport;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    /// Evals per rollout; also the rollout buffer size.
    pub n_steps: usize,
    /// Gradient steps per update.
    pub epochs: usize,
    /// Initial learning rate; cosine-annealed to zero over each chunk.
    pub lr: f64,
    pub clip_eps: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    /// Early-exit confidence threshold.
    pub tau: f64,
    pub chunks: usize,
    /// Standardize advantages within each batch of more than one sample.
    pub normalize_advantage: bool,
    pub net: NetConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            n_steps: 2,
            epochs: 2,
            lr: 1e-3,
            clip_eps: 0.2,
            ent_coef: 0.01,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            tau: 0.95,
            chunks: 5,
            normalize_advantage: true,
            net: NetConfig::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_steps == 0 || self.epochs == 0 || self.chunks == 0 {
            return Err("n_steps, epochs and chunks must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.clip_eps > 0.0 && self.max_grad_norm > 0.0 && self.tau > 0.0) {
            return Err("lr, clip_eps, max_grad_norm and tau must be > 0".into());
        }
        if !(self.ent_coef >= 0.0 && self.vf_coef >= 0.0) {
            return Err("ent_coef and vf_coef must be >= 0".into());
        }
        let n = self.net;
        if n.d_model == 0 || n.n_heads == 0 || n.ff_dim == 0 || n.history == 0 || n.d_model % n.n_heads != 0 {
            return Err("net: sizes must be >= 1 and d_model divisible by n_heads".into());
        }
        Ok(())
    }
}

/// `lr0` at progress 0, zero at progress 1.
pub fn cosine_lr(lr0: f64, progress: f64) -> f64 {
    lr0 * 0.5 * (1.0 + (PI * progress.clamp(0.0, 1.0)).cos())
}

/// One collected eval.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Array2<f64>,
    pub action: Vec<usize>,
    pub logprob: f64,
    pub value: f64,
    /// Reward divided by the reward scale.
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &PolicyParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|(_, _, v)| vec![0.0; v.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-5, t: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update; returns whether every parameter is still finite.
    pub fn step(&mut self, params: &mut PolicyParams, grad: &PolicyParams, lr: f64) -> bool {
        self.t += 1;
        let mut finite = true;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let grads = grad.tensors();
        for (((p, (_, _, g)), m), v) in params.tensors_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let (step, inv_c2) = (lr / c1, 1.0 / c2);
            let n = p.len();
            let (g, m, v) = (&g[..n], &mut m[..n], &mut v[..n]);
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
                finite &= p[i].is_finite();
            }
        }
        finite
    }
}

fn grad_norm(grad: &PolicyParams) -> f64 {
    grad.tensors().iter().flat_map(|(_, _, v)| v.iter()).map(|g| g * g).sum::<f64>().sqrt()
}

fn scale_grad(grad: &mut PolicyParams, k: f64) {
    for t in grad.tensors_mut() {
        t.iter_mut().for_each(|g| *g *= k);
    }
}

fn advantages(batch: &[Transition], normalize: bool) -> Vec<f64> {
    let adv: Vec<f64> = batch.iter().map(|t| t.reward - t.value).collect();
    let n = adv.len();
    if !normalize || n < 2 {
        return adv;
    }
    let mean = adv.iter().sum::<f64>() / n as f64;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

/// A forward pass kept for reuse while the parameters have not changed.
type Forward = (PolicyOutput, ForwardCache);

/// Clipped-surrogate loss of `batch` under `params` and its gradient.
pub fn loss_and_grad(
    params: &PolicyParams,
    batch: &[Transition],
    cfg: &PpoConfig,
) -> Result<(LossReport, PolicyParams), PolicyError> {
    loss_and_grad_from(params, batch, cfg, Vec::new())
}

/// As [`loss_and_grad`], taking forward passes of `params` on the first
/// transitions from `known` instead of recomputing them.
fn loss_and_grad_from(
    params: &PolicyParams,
    batch: &[Transition],
    cfg: &PpoConfig,
    known: Vec<Forward>,
) -> Result<(LossReport, PolicyParams), PolicyError> {
    let n = batch.len() as f64;
    let adv = advantages(batch, cfg.normalize_advantage);
    let mut grad = params.zeros_like();
    let mut rep = LossReport::default();
    let mut known = known.into_iter();
    for (t, &a) in batch.iter().zip(&adv) {
        let (out, cache) = match known.next() {
            Some(f) => f,
            None => params.forward_cached(&t.obs)?,
        };
        let lp = log_prob(&out, &t.action);
        let log_ratio = lp - t.logprob;
        let ratio = log_ratio.exp();
        let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
        let (s1, s2) = (ratio * a, clipped * a);
        rep.policy_loss -= s1.min(s2) / n;
        let g_lp = if s1 <= s2 { -ratio * a / n } else { 0.0 };
        let err = out.value - t.reward;
        rep.value_loss += err * err / n;
        let g_value = cfg.vf_coef * 2.0 * err / n;
        let g_ent = -cfg.ent_coef / n;
        rep.approx_kl += ((ratio - 1.0) - log_ratio) / n;
        if (ratio - 1.0).abs() > cfg.clip_eps {
            rep.clip_fraction += 1.0 / n;
        }

        let mut dlogits = Vec::with_capacity(out.dists.len());
        for (dist, &act) in out.dists.iter().zip(&t.action) {
            let h = dist.entropy();
            rep.entropy += h / n;
            let d = Array1::from_shape_fn(dist.probs.len(), |j| {
                let p = dist.probs[j];
                if p == 0.0 {
                    return 0.0;
                }
                let onehot = if j == act { 1.0 } else { 0.0 };
                g_lp * (onehot - p) - g_ent * p * (dist.log_probs[j] + h)
            });
            dlogits.push(d);
        }
        params.backward(&out, &cache, &dlogits, g_value, &mut grad);
    }
    rep.total = rep.policy_loss + cfg.vf_coef * rep.value_loss - cfg.ent_coef * rep.entropy;
    if !rep.total.is_finite() {
        return Err(PolicyError::NonFinite(format!("ppo loss {rep:?}")));
    }
    rep.grad_norm = grad_norm(&grad);
    Ok((rep, grad))
}

/// `cfg.epochs` full-batch gradient steps. Returns the first epoch's report.
pub fn ppo_update(
    params: &mut PolicyParams,
    adam: &mut Adam,
    batch: &[Transition],
    cfg: &PpoConfig,
    lr: f64,
) -> Result<LossReport, PolicyError> {
    ppo_update_from(params, adam, batch, cfg, lr, Vec::new())
}

fn ppo_update_from(
    params: &mut PolicyParams,
    adam: &mut Adam,
    batch: &[Transition],
    cfg: &PpoConfig,
    lr: f64,
    mut known: Vec<Forward>,
) -> Result<LossReport, PolicyError> {
    let mut first = None;
    for _ in 0..cfg.epochs {
        let (rep, mut grad) = loss_and_grad_from(params, batch, cfg, std::mem::take(&mut known))?;
        if !rep.grad_norm.is_finite() {
            return Err(PolicyError::NonFinite("gradient".into()));
        }
        if rep.grad_norm > cfg.max_grad_norm {
            scale_grad(&mut grad, cfg.max_grad_norm / rep.grad_norm);
        }
        if !adam.step(params, &grad, lr) {
            return Err(PolicyError::NonFinite("parameters after update".into()));
        }
        first.get_or_insert(rep);
    }
    Ok(first.unwrap_or_default())
}

/// Draws `n` strategies from the current policy and evaluates them.
pub fn collect(
    env: &mut SearchEnv,
    params: &PolicyParams,
    buf: &mut EliteBuffer,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Transition>, SearchError> {
    Ok(collect_from(env, params, buf, n, rng, None)?.0)
}

/// As [`collect`], also returning each step's forward pass. `ahead`, if
/// given, is the forward pass at the current observation.
fn collect_from(
    env: &mut SearchEnv,
    params: &PolicyParams,
    buf: &mut EliteBuffer,
    n: usize,
    rng: &mut ChaCha8Rng,
    mut ahead: Option<Forward>,
) -> Result<(Vec<Transition>, Vec<Forward>), SearchError> {
    let sizes = params.head_sizes();
    let scale = env.reward_config().scale;
    let mut batch = Vec::with_capacity(n);
    let mut forwards = Vec::with_capacity(n);
    for _ in 0..n {
        let obs = build_observation(buf, &sizes);
        let (out, cache) = match ahead.take() {
            Some(f) => f,
            None => params.forward_cached(&obs)?,
        };
        let s = sample(&out, rng);
        let step = env.step(&s.action)?;
        if step.valid {
            buf.update(&s.action, step.reward);
        }
        batch.push(Transition {
            obs,
            action: s.action,
            logprob: s.logprob,
            value: out.value,
            reward: step.reward / scale,
        });
        forwards.push((out, cache));
    }
    Ok((batch, forwards))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChunkOutcome {
    Exhausted { evals: usize },
    EarlyExit { evals: usize },
}

impl ChunkOutcome {
    pub fn evals(self) -> usize {
        match self {
            ChunkOutcome::Exhausted { evals } | ChunkOutcome::EarlyExit { evals } => evals,
        }
    }
}

/// Search state that survives restarts: env (and with it the best raw b),
/// elite buffer and both rng streams.
pub struct PpoSearch<'e> {
    env: &'e mut SearchEnv,
    cfg: PpoConfig,
    seed: u64,
    buf: EliteBuffer,
    rng: ChaCha8Rng,
    init_rng: ChaCha8Rng,
    params: PolicyParams,
    adam: Adam,
    restarts: Vec<usize>,
    updates: Vec<LossReport>,
    /// Forward pass at the current observation under the current params.
    ahead: Option<Forward>,
}

impl<'e> PpoSearch<'e> {
    pub fn new(env: &'e mut SearchEnv, cfg: PpoConfig, seed: u64) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        init_rng.set_stream(1);
        let params = PolicyParams::init(cfg.net, env.workload().head_masks(), &mut init_rng);
        let adam = Adam::new(&params);
        let restarts = vec![env.evals_used()];
        Self {
            buf: EliteBuffer::new(cfg.net.history),
            env,
            cfg,
            seed,
            rng,
            init_rng,
            params,
            adam,
            restarts,
            updates: Vec::new(),
            ahead: None,
        }
    }

    /// Fresh parameters and optimizer from the init stream; everything else kept.
    pub fn restart(&mut self) {
        self.params = PolicyParams::init(self.cfg.net, self.env.workload().head_masks(), &mut self.init_rng);
        self.adam = Adam::new(&self.params);
        self.ahead = None;
        self.restarts.push(self.env.evals_used());
    }

    pub fn env(&self) -> &SearchEnv {
        self.env
    }

    pub fn elites(&self) -> &EliteBuffer {
        &self.buf
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut PolicyParams {
        self.ahead = None;
        &mut self.params
    }

    pub fn updates(&self) -> &[LossReport] {
        &self.updates
    }

    /// Whether every head of the policy at the current observation is at
    /// least `tau` confident.
    pub fn confident(&self) -> Result<bool, PolicyError> {
        let obs = build_observation(&self.buf, &self.params.head_sizes());
        Ok(all_confident(&self.params.forward(&obs)?, self.cfg.tau))
    }

    /// Alternates collect and update until `allowance` evals are spent or the
    /// policy is confident after an update.
    pub fn run_chunk(&mut self, allowance: usize) -> Result<ChunkOutcome, SearchError> {
        let mut used = 0;
        while used < allowance {
            let n = self.cfg.n_steps.min(allowance - used).min(self.env.remaining());
            if n == 0 {
                break;
            }
            let lr = cosine_lr(self.cfg.lr, used as f64 / allowance as f64);
            let (batch, forwards) =
                collect_from(self.env, &self.params, &mut self.buf, n, &mut self.rng, self.ahead.take())?;
            used += n;
            let rep = ppo_update_from(&mut self.params, &mut self.adam, &batch, &self.cfg, lr, forwards)?;
            self.updates.push(rep);
            let obs = build_observation(&self.buf, &self.params.head_sizes());
            let ahead = self.params.forward_cached(&obs)?;
            let confident = all_confident(&ahead.0, self.cfg.tau);
            self.ahead = Some(ahead);
            if confident {
                return Ok(ChunkOutcome::EarlyExit { evals: used });
            }
        }
        Ok(ChunkOutcome::Exhausted { evals: used })
    }

    /// Runs chunks until the env budget is spent. Each chunk gets an equal
    /// share plus whatever the previous chunk saved by exiting early; the
    /// last scheduled chunk, and any restart after it, gets all that remains.
    pub fn run(mut self) -> Result<SearchReport, SearchError> {
        let start = Instant::now();
        let base = self.env.budget() / self.cfg.chunks;
        let mut carry = 0;
        let mut chunk = 0;
        while self.env.remaining() > 0 {
            if chunk > 0 {
                self.restart();
            }
            let remaining = self.env.remaining();
            let allowance = if chunk + 1 >= self.cfg.chunks { remaining } else { (base + carry).min(remaining) };
            let outcome = self.run_chunk(allowance)?;
            carry = allowance - outcome.evals();
            chunk += 1;
        }
        let wall = start.elapsed().as_secs_f64();
        Ok(SearchReport::from_env("ppo", self.seed, self.env, self.restarts, wall)?)
    }
}

pub fn run_search(env: &mut SearchEnv, cfg: &PpoConfig, seed: u64) -> Result<SearchReport, SearchError> {
    PpoSearch::new(env, *cfg, seed).run()
}
