//! Elite buffer, observation building, and sampling from the policy network.

pub mod checkpoint;
mod net;

pub(crate) use net::ForwardCache;
pub use net::{HeadDist, LayerNorm, Linear, NetConfig, PolicyOutput, PolicyParams};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Elite {
    pub action: Vec<usize>,
    pub reward: f64,
}

/// Top-T valid strategies, sorted by reward, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EliteBuffer {
    capacity: usize,
    entries: Vec<Elite>,
}

impl EliteBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: Vec::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[Elite] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn min_reward(&self) -> Option<f64> {
        self.entries.last().map(|e| e.reward)
    }

    /// Inserts a valid strategy if there is room or it beats the worst elite.
    /// Returns whether the buffer changed.
    pub fn update(&mut self, action: &[usize], reward: f64) -> bool {
        if self.capacity == 0 || self.entries.iter().any(|e| e.action == action) {
            return false;
        }
        if self.entries.len() == self.capacity {
            if reward <= self.entries[self.capacity - 1].reward {
                return false;
            }
            self.entries.pop();
        }
        // after existing entries of equal reward, so earlier finds rank first
        let pos = self.entries.partition_point(|e| e.reward >= reward);
        self.entries.insert(pos, Elite { action: action.to_vec(), reward });
        true
    }
}

/// T x A matrix of elite actions, each index scaled by `size - 1` into [0, 1].
/// Missing rows stay zero.
pub fn build_observation(buf: &EliteBuffer, head_sizes: &[usize]) -> Array2<f64> {
    let mut x = Array2::zeros((buf.capacity(), head_sizes.len()));
    for (t, e) in buf.entries().iter().enumerate() {
        for (m, (&a, &n)) in e.action.iter().zip(head_sizes).enumerate() {
            x[[t, m]] = if n > 1 { a as f64 / (n - 1) as f64 } else { 0.0 };
        }
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub action: Vec<usize>,
    pub logprob: f64,
    pub entropy: f64,
}

/// Independent categorical draw per head.
pub fn sample<R: Rng + ?Sized>(out: &PolicyOutput, rng: &mut R) -> Sample {
    let mut action = Vec::with_capacity(out.dists.len());
    let mut logprob = 0.0;
    let mut entropy = 0.0;
    for dist in &out.dists {
        let a = draw(&dist.probs, rng.random::<f64>());
        logprob += dist.log_probs[a];
        entropy += dist.entropy();
        action.push(a);
    }
    Sample { action, logprob, entropy }
}

fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Sum of per-head log-probabilities of `action`.
pub fn log_prob(out: &PolicyOutput, action: &[usize]) -> f64 {
    out.dists.iter().zip(action).map(|(d, &a)| d.log_probs[a]).sum()
}

/// Max probability per head.
pub fn confidence(out: &PolicyOutput) -> Vec<f64> {
    out.dists.iter().map(HeadDist::max_prob).collect()
}

/// True when every head is at least `tau` confident. Heads with a single
/// admissible choice always are.
pub fn all_confident(out: &PolicyOutput, tau: f64) -> bool {
    confidence(out).iter().all(|&c| c >= tau)
}
