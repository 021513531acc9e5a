//! The record every search algorithm produces.

use serde::{Deserialize, Serialize};

use crate::env::{SearchEnv, Selection};
use crate::error::EnvError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub algorithm: String,
    pub seed: u64,
    pub budget: usize,
    pub evals: usize,
    /// Argmax-reward strategy over the eval log.
    pub selection: Selection,
    /// Best valid raw throughput seen during the run.
    pub best_raw: f64,
    /// Strategy achieving `best_raw`, if any eval was valid.
    pub best_by_raw: Option<Selection>,
    /// Reward of every eval, in order.
    pub reward_curve: Vec<f64>,
    /// Best valid raw after every eval.
    pub best_curve: Vec<f64>,
    /// Eval index at which each (re)started agent took over.
    pub restarts: Vec<usize>,
    pub wall_clock_s: f64,
}

impl SearchReport {
    pub fn from_env(
        algorithm: &str,
        seed: u64,
        env: &SearchEnv,
        restarts: Vec<usize>,
        wall_clock_s: f64,
    ) -> Result<Self, EnvError> {
        Ok(Self {
            algorithm: algorithm.to_string(),
            seed,
            budget: env.budget(),
            evals: env.evals_used(),
            selection: env.final_selection()?,
            best_raw: env.best_raw(),
            best_by_raw: env.best_by_raw(),
            reward_curve: env.log().iter().map(|r| r.reward).collect(),
            best_curve: env.log().iter().map(|r| r.best_raw).collect(),
            restarts,
            wall_clock_s,
        })
    }

    /// Copy with the wall-clock zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self { wall_clock_s: 0.0, ..self.clone() }
    }
}
