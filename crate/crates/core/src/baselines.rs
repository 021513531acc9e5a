//! Non-learning baselines: random walk, simulated annealing and an
//! exhaustive sweep of the coarse degrees with Megatron shard dims pinned.
//!
//! All of them go through [`SearchEnv::step`], so validity gates and budget
//! accounting match the PPO search.

use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::SearchEnv;
use crate::error::SearchError;
use crate::search::SearchReport;
use crate::strategy::{Strategy, COARSE_HEADS};

pub fn random_walk(env: &mut SearchEnv, seed: u64) -> Result<SearchReport, SearchError> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let workload = env.workload_arc();
    while env.remaining() > 0 {
        env.step(&workload.sample_uniform(&mut rng))?;
    }
    Ok(SearchReport::from_env("rw", seed, env, vec![0], start.elapsed().as_secs_f64())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaConfig {
    pub t_initial: f64,
    /// Coordinates changed per proposal.
    pub neighbor_moves: usize,
}

impl Default for SaConfig {
    fn default() -> Self {
        Self { t_initial: 100.0, neighbor_moves: 1 }
    }
}

impl SaConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.t_initial > 0.0) {
            return Err("t_initial must be > 0".into());
        }
        if self.neighbor_moves == 0 {
            return Err("neighbor_moves must be >= 1".into());
        }
        Ok(())
    }
}

/// Cosine-annealed temperature after `step` of `total` evals.
pub fn sa_temperature(t_initial: f64, step: usize, total: usize) -> f64 {
    let progress = if total == 0 { 1.0 } else { step as f64 / total as f64 };
    t_initial * 0.5 * (1.0 + (PI * progress.min(1.0)).cos())
}

/// Metropolis acceptance probability of a reward change `delta`.
pub fn sa_accept_probability(delta: f64, temperature: f64) -> f64 {
    if delta >= 0.0 {
        1.0
    } else if temperature <= 0.0 {
        0.0
    } else {
        (delta / temperature).exp()
    }
}

pub fn simulated_annealing(env: &mut SearchEnv, cfg: &SaConfig, seed: u64) -> Result<SearchReport, SearchError> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let workload = env.workload_arc();
    let masks = workload.head_masks();
    let movable: Vec<usize> = (0..masks.len()).filter(|&m| masks[m].iter().filter(|&&b| b).count() > 1).collect();
    let total = env.budget();

    let mut current = workload.sample_uniform(&mut rng);
    let mut current_reward = env.step(&current)?.reward;
    while env.remaining() > 0 {
        let mut proposal = current.clone();
        for _ in 0..cfg.neighbor_moves {
            if movable.is_empty() {
                break;
            }
            let m = movable[rng.random_range(0..movable.len())];
            let others: Vec<usize> = (0..masks[m].len()).filter(|&i| masks[m][i] && i != proposal[m]).collect();
            proposal[m] = others[rng.random_range(0..others.len())];
        }
        let reward = env.step(&proposal)?.reward;
        let temp = sa_temperature(cfg.t_initial, env.evals_used() - 1, total);
        let p = sa_accept_probability(reward - current_reward, temp);
        if p >= 1.0 || rng.random::<f64>() < p {
            current = proposal;
            current_reward = reward;
        }
    }
    Ok(SearchReport::from_env("sa", seed, env, vec![0], start.elapsed().as_secs_f64())?)
}

/// Number of (tp, ep, pp, batch) tuples in the env's action space.
pub fn coarse_grid_size(env: &SearchEnv) -> usize {
    env.workload().space.head_sizes()[..COARSE_HEADS].iter().product()
}

/// Evaluates every coarse tuple with Megatron shard dims and selects by raw
/// throughput. Needs an env budget of at least [`coarse_grid_size`].
pub fn megatron_exhaustive(env: &mut SearchEnv) -> Result<SearchReport, SearchError> {
    let start = Instant::now();
    let workload = env.workload_arc();
    let dims = workload.megatron_search_dims();
    let space = &workload.space;
    for &tp in &space.tp_domain {
        for &ep in &space.ep_domain {
            for &pp in &space.pp_domain {
                for &batch in &space.batch_domain {
                    let s = Strategy { tp, ep, pp, batch, op_dims: dims.clone() };
                    let action = space.encode(&s).map_err(crate::error::EnvError::from)?;
                    env.step(&action)?;
                }
            }
        }
    }
    let best = env.best_by_raw().ok_or(SearchError::NoValidConfiguration)?;
    let mut report = SearchReport::from_env("exhaustive", 0, env, vec![0], start.elapsed().as_secs_f64())?;
    report.selection = best;
    Ok(report)
}
