//! A fully resolved search problem: model, hardware, action space and the
//! subset of fused ops whose shard choice is searched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::StrategyError;
use crate::sim::{simulate, SimRequest, SimResult};
use crate::strategy::{
    canonical_ops, megatron_dim, ActionSpace, FusedOp, FusedOpDescriptor, HardwareSpec, ModelSpec, ShardDim, Strategy,
    COARSE_HEADS, DIM_CHOICES,
};

pub const DEFAULT_SLO_TPOT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub model: ModelSpec,
    pub hw: HardwareSpec,
    pub space: ActionSpace,
    /// All canonical ops, in canonical order.
    pub ops: Vec<FusedOpDescriptor>,
    /// Ops whose shard choice is part of the action, in action order.
    /// Ops not listed keep their Megatron assignment.
    pub search_ops: Vec<FusedOp>,
    pub context_len: u64,
    pub slo_tpot: f64,
    pub workspace_bytes: f64,
}

impl Workload {
    /// Workload over every canonical op with the default domains.
    pub fn new(model: ModelSpec, hw: HardwareSpec, context_len: u64) -> Result<Self, StrategyError> {
        let space = ActionSpace::default_domains(FusedOp::CANONICAL.len());
        Self::with_space(model, hw, space, FusedOp::CANONICAL.to_vec(), context_len, DEFAULT_SLO_TPOT, 0.0)
    }

    pub fn with_space(
        model: ModelSpec,
        hw: HardwareSpec,
        space: ActionSpace,
        search_ops: Vec<FusedOp>,
        context_len: u64,
        slo_tpot: f64,
        workspace_bytes: f64,
    ) -> Result<Self, StrategyError> {
        model.validate()?;
        hw.validate()?;
        space.validate()?;
        if space.num_ops != search_ops.len() {
            return Err(StrategyError::InvalidSpace(format!(
                "num_ops {} but {} searched ops listed",
                space.num_ops,
                search_ops.len()
            )));
        }
        for (i, op) in search_ops.iter().enumerate() {
            if search_ops[..i].contains(op) {
                return Err(StrategyError::InvalidSpace(format!("op {op} listed twice")));
            }
        }
        if context_len == 0 {
            return Err(StrategyError::InvalidSpace("context_len must be >= 1".into()));
        }
        if !(slo_tpot > 0.0) {
            return Err(StrategyError::InvalidSpace("slo_tpot must be > 0".into()));
        }
        let ops = canonical_ops(&model);
        Ok(Self { model, hw, space, ops, search_ops, context_len, slo_tpot, workspace_bytes })
    }

    pub fn searched_descriptors(&self) -> Vec<&FusedOpDescriptor> {
        self.search_ops.iter().map(|op| &self.ops[op.canonical_index()]).collect()
    }

    /// Megatron dims for the searched ops, in action order.
    pub fn megatron_search_dims(&self) -> Vec<ShardDim> {
        self.searched_descriptors().into_iter().map(megatron_dim).collect()
    }

    /// Strategy with one dim per canonical op; unsearched ops get Megatron dims.
    pub fn expand(&self, s: &Strategy) -> Strategy {
        let mut dims: Vec<ShardDim> = self.ops.iter().map(megatron_dim).collect();
        for (op, &d) in self.search_ops.iter().zip(&s.op_dims) {
            dims[op.canonical_index()] = d;
        }
        Strategy { op_dims: dims, ..s.clone() }
    }

    pub fn simulate(&self, s: &Strategy) -> SimResult {
        let full = self.expand(s);
        simulate(&self.request(&full))
    }

    pub fn request<'a>(&'a self, full: &'a Strategy) -> SimRequest<'a> {
        SimRequest {
            model: &self.model,
            hw: &self.hw,
            ops: &self.ops,
            strategy: full,
            context_len: self.context_len,
            slo_tpot: self.slo_tpot,
            workspace_bytes: self.workspace_bytes,
        }
    }

    /// Admissible choices per action head. Coarse heads admit every index.
    pub fn head_masks(&self) -> Vec<Vec<bool>> {
        let mut masks: Vec<Vec<bool>> =
            self.space.head_sizes()[..COARSE_HEADS].iter().map(|&n| vec![true; n]).collect();
        for desc in self.searched_descriptors() {
            masks.push(ShardDim::ALL.iter().map(|&d| desc.admits(d)).collect());
        }
        debug_assert!(masks[COARSE_HEADS..].iter().all(|m| m.len() == DIM_CHOICES));
        masks
    }

    /// Uniform draw over the admissible joint space.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        self.head_masks()
            .iter()
            .map(|mask| {
                let allowed: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
                allowed[rng.random_range(0..allowed.len())]
            })
            .collect()
    }

    /// Short identifier for reports: model name and context length.
    pub fn key(&self) -> String {
        format!("{}@{}", self.model.name, self.context_len)
    }
}
