//! One-step search environment wrapping the simulator.
//!
//! Each `step` decodes an action, simulates it and returns the shaped reward
//! `alpha * raw + beta * (raw - best)`, where `best` is the best valid raw
//! throughput seen before this step. Invalid strategies get a flat penalty
//! and still consume budget.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;

use crate::error::EnvError;
use crate::sim::InvalidReason;
use crate::strategy::Strategy;
use crate::workload::Workload;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    pub invalid_penalty: f64,
    /// Typical raw throughput; learners divide rewards by it.
    pub scale: f64,
}

impl RewardConfig {
    /// alpha = beta = 1 and a penalty of minus one scale unit.
    pub fn with_scale(scale: f64) -> Self {
        Self { alpha: 1.0, beta: 1.0, invalid_penalty: -scale, scale }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err("alpha and beta must be > 0".into());
        }
        if !(self.invalid_penalty < 0.0) {
            return Err("invalid_penalty must be < 0".into());
        }
        if !(self.scale > 0.0) {
            return Err("scale must be > 0".into());
        }
        Ok(())
    }

    pub fn reward(&self, raw: f64, best: f64) -> f64 {
        self.alpha * raw + self.beta * (raw - best)
    }
}

/// One line of the eval log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub eval: usize,
    pub action: Vec<usize>,
    pub raw: f64,
    pub reward: f64,
    pub valid: bool,
    pub reason: InvalidReason,
    /// Best valid raw after this eval.
    pub best_raw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub raw: f64,
    pub valid: bool,
    pub reason: InvalidReason,
}

/// The strategy picked at the end of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub eval: usize,
    pub action: Vec<usize>,
    pub strategy: Strategy,
    pub reward: f64,
    pub raw: f64,
    pub valid: bool,
}

pub struct SearchEnv {
    workload: Arc<Workload>,
    reward: RewardConfig,
    budget: usize,
    best_raw: f64,
    log: Vec<EvalRecord>,
    sink: Option<Box<dyn Write + Send>>,
}

impl SearchEnv {
    pub fn new(workload: Arc<Workload>, reward: RewardConfig, budget: usize) -> Self {
        Self { workload, reward, budget, best_raw: 0.0, log: Vec::new(), sink: None }
    }

    /// Streams every eval record as one JSON line to `sink`, flushing per record.
    pub fn with_sink(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn workload(&self) -> &Workload {
        &self.workload
    }

    pub fn workload_arc(&self) -> Arc<Workload> {
        Arc::clone(&self.workload)
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn evals_used(&self) -> usize {
        self.log.len()
    }

    pub fn remaining(&self) -> usize {
        self.budget - self.log.len()
    }

    pub fn best_raw(&self) -> f64 {
        self.best_raw
    }

    pub fn log(&self) -> &[EvalRecord] {
        &self.log
    }

    pub fn step(&mut self, action: &[usize]) -> Result<StepOutcome, EnvError> {
        if self.log.len() >= self.budget {
            return Err(EnvError::BudgetExhausted { budget: self.budget });
        }
        let strategy = self.workload.space.decode(action)?;
        let result = self.workload.simulate(&strategy);
        let (reward, raw) = if result.valid {
            (self.reward.reward(result.throughput, self.best_raw), result.throughput)
        } else {
            (self.reward.invalid_penalty, 0.0)
        };
        if result.valid && raw > self.best_raw {
            self.best_raw = raw;
        }
        let record = EvalRecord {
            eval: self.log.len(),
            action: action.to_vec(),
            raw,
            reward,
            valid: result.valid,
            reason: result.invalid_reason,
            best_raw: self.best_raw,
        };
        if let Some(sink) = self.sink.as_mut() {
            let line = serde_json::to_string(&record).map_err(|e| EnvError::Log(e.to_string()))?;
            writeln!(sink, "{line}").and_then(|_| sink.flush()).map_err(|e| EnvError::Log(e.to_string()))?;
        }
        self.log.push(record);
        Ok(StepOutcome { reward, raw, valid: result.valid, reason: result.invalid_reason })
    }

    /// The logged strategy with the highest reward; ties go to the earliest.
    pub fn final_selection(&self) -> Result<Selection, EnvError> {
        let best = self
            .log
            .iter()
            .reduce(|best, r| if r.reward > best.reward { r } else { best })
            .ok_or(EnvError::NoEvaluations)?;
        Ok(Selection {
            eval: best.eval,
            action: best.action.clone(),
            strategy: self.workload.space.decode(&best.action)?,
            reward: best.reward,
            raw: best.raw,
            valid: best.valid,
        })
    }

    /// The valid logged strategy with the highest raw throughput.
    pub fn best_by_raw(&self) -> Option<Selection> {
        let best = self.log.iter().filter(|r| r.valid).reduce(|best, r| if r.raw > best.raw { r } else { best })?;
        Some(Selection {
            eval: best.eval,
            action: best.action.clone(),
            strategy: self.workload.space.decode(&best.action).ok()?,
            reward: best.reward,
            raw: best.raw,
            valid: true,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::strategy::{HardwareSpec, ModelSpec};

    pub(crate) fn small_workload() -> Workload {
        let model = ModelSpec {
            name: "small".into(),
            num_layers: 4,
            hidden_dim: 256,
            ffn_dim: 128,
            num_heads: 8,
            head_dim: 32,
            num_kv_heads: 4,
            num_experts: 8,
            experts_per_token: 2,
            vocab_size: 1024,
            dtype_bytes: 2,
            has_shared_expert: true,
        };
        let hw = HardwareSpec {
            name: "test".into(),
            peak_flops: 1e14,
            hbm_bandwidth: 1e12,
            hbm_capacity: 16e6,
            intra_node_bw: 1e11,
            inter_node_bw: 1e10,
            node_size: 4,
            device_budget: 64,
            per_collective_latency: 1e-6,
            kernel_overhead: 1e-6,
        };
        Workload::new(model, hw, 512).unwrap()
    }

    fn env(budget: usize) -> SearchEnv {
        SearchEnv::new(Arc::new(small_workload()), RewardConfig::with_scale(100.0), budget)
    }

    #[test]
    fn reward_substitution() {
        let r = RewardConfig { alpha: 1.0, beta: 1.0, invalid_penalty: -1.0, scale: 1.0 };
        assert_eq!(r.reward(10.0, 8.0), 12.0);
        assert_eq!(r.reward(5.0, 8.0), 2.0);
    }

    #[test]
    fn best_updates_after_reward() {
        let mut e = env(10);
        let w = e.workload_arc();
        let dims = w.megatron_search_dims();
        let mut a = w.space.encode(&Strategy { tp: 1, ep: 1, pp: 1, batch: 1, op_dims: dims.clone() }).unwrap();
        let first = e.step(&a).unwrap();
        assert!(first.valid, "{:?}", first.reason);
        // b was 0 before the first valid eval
        assert_eq!(first.reward, 2.0 * first.raw);
        assert_eq!(e.best_raw(), first.raw);
        a[3] = 1;
        let second = e.step(&a).unwrap();
        assert!(second.valid);
        assert_eq!(second.reward, second.raw + (second.raw - first.raw));
        assert_eq!(e.best_raw(), first.raw.max(second.raw));
    }

    #[test]
    fn invalid_costs_budget_and_penalty() {
        let mut e = env(2);
        let w = e.workload_arc();
        let mut a = vec![0; w.space.action_len()];
        a[4 + crate::strategy::FusedOp::RouterGate.canonical_index()] = 1;
        let out = e.step(&a).unwrap();
        assert!(!out.valid);
        assert_eq!(out.reward, -100.0);
        assert_eq!(e.best_raw(), 0.0);
        assert_eq!(e.evals_used(), 1);
        e.step(&a).unwrap();
        assert!(matches!(e.step(&a), Err(EnvError::BudgetExhausted { budget: 2 })));
        assert_eq!(e.evals_used(), 2);
    }

    #[test]
    fn final_selection_is_argmax_reward() {
        let mut e = env(10);
        assert!(matches!(e.final_selection(), Err(EnvError::NoEvaluations)));
        let w = e.workload_arc();
        let mut bad = vec![0; w.space.action_len()];
        bad[4 + crate::strategy::FusedOp::FinalNorm.canonical_index()] = 2;
        e.step(&bad).unwrap();
        let mut bad2 = bad.clone();
        bad2[0] = 1;
        e.step(&bad2).unwrap();
        let sel = e.final_selection().unwrap();
        assert_eq!(sel.eval, 0);
        assert!(!sel.valid);
        let good = w.space.encode(&Strategy { tp: 1, ep: 1, pp: 1, batch: 2, op_dims: w.megatron_search_dims() });
        e.step(&good.unwrap()).unwrap();
        let sel = e.final_selection().unwrap();
        assert_eq!(sel.eval, 2);
        assert!(sel.valid);
    }

    #[test]
    fn sink_receives_json_lines() {
        use std::sync::Mutex;
        #[derive(Clone, Default)]
        struct Shared(Arc<Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(buf);
                Ok(buf.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let buf = Shared::default();
        let mut e = env(3).with_sink(Box::new(buf.clone()));
        let a = vec![0; e.workload().space.action_len()];
        e.step(&a).unwrap();
        e.step(&a).unwrap();
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        let recs: Vec<EvalRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs, e.log());
    }
}
