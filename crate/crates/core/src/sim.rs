//! Roofline performance model for one decode step.
//!
//! Every cost formula of the simulator lives in this module:
//!
//! * op time: `max(flops / peak_flops, bytes / hbm_bandwidth) + kernel_overhead`
//! * collectives over `n` devices with payload `S` on link bandwidth `bw`:
//!   all-reduce `2(n-1)/n * S / bw`; all-gather, reduce-scatter and all-to-all
//!   `(n-1)/n * S / bw`; point-to-point `S / bw`; each plus
//!   `per_collective_latency * ceil(log2 n)`
//! * decode FLOPs: `2 m n k` per matmul; attention `4 * heads * head_dim * ctx`
//!   per token; MoE matmuls see `batch * top_k / ep` routed tokens
//!
//! Pipelining has no microbatch interleaving: per-token latency is the sum of
//! stage times plus `(pp - 1)` activation transfers, and steady-state
//! throughput is limited by the slowest stage.

use serde::{Deserialize, Serialize};

use crate::error::LayoutError;
use crate::layout::{CollectiveKind, CollectiveOp, CommGroup, Interconnect, LayerPlan, LayerPlanner};
use crate::strategy::{FusedOp, FusedOpDescriptor, HardwareSpec, ModelSpec, OpClass, ShardDim, Strategy};

/// Everything the simulator needs to score one strategy.
///
/// `strategy.op_dims` must hold one entry per op in `ops` (the full list,
/// not a searched subset).
#[derive(Debug, Clone, Copy)]
pub struct SimRequest<'a> {
    pub model: &'a ModelSpec,
    pub hw: &'a HardwareSpec,
    pub ops: &'a [FusedOpDescriptor],
    pub strategy: &'a Strategy,
    pub context_len: u64,
    /// Time-per-output-token bound, seconds.
    pub slo_tpot: f64,
    /// Fixed activation workspace per device, bytes.
    pub workspace_bytes: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    None,
    OverDeviceBudget,
    LayoutError,
    Oom,
    SloViolation,
}

impl InvalidReason {
    pub fn as_str(self) -> &'static str {
        match self {
            InvalidReason::None => "none",
            InvalidReason::OverDeviceBudget => "over_device_budget",
            InvalidReason::LayoutError => "layout_error",
            InvalidReason::Oom => "oom",
            InvalidReason::SloViolation => "slo_violation",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeBreakdown {
    pub compute_s: f64,
    pub comm_s: f64,
    pub pipeline_s: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub weights: f64,
    pub kv_cache: f64,
    pub workspace: f64,
}

impl MemoryBreakdown {
    pub fn total(&self) -> f64 {
        self.weights + self.kv_cache + self.workspace
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub valid: bool,
    pub invalid_reason: InvalidReason,
    /// Tokens/s/chip; zero when invalid.
    pub throughput: f64,
    pub tpot: f64,
    pub mem_per_device: f64,
    pub time_breakdown: TimeBreakdown,
    /// Set when planning failed.
    pub layout_error: Option<String>,
}

impl SimResult {
    fn invalid(reason: InvalidReason) -> Self {
        Self {
            valid: false,
            invalid_reason: reason,
            throughput: 0.0,
            tpot: 0.0,
            mem_per_device: 0.0,
            time_breakdown: TimeBreakdown::default(),
            layout_error: None,
        }
    }
}

pub fn op_time(flops: f64, bytes_moved: f64, hw: &HardwareSpec) -> f64 {
    (flops / hw.peak_flops).max(bytes_moved / hw.hbm_bandwidth) + hw.kernel_overhead
}

fn link_bandwidth(link: Interconnect, hw: &HardwareSpec) -> f64 {
    match link {
        Interconnect::IntraNode => hw.intra_node_bw,
        Interconnect::InterNode => hw.inter_node_bw,
    }
}

pub fn latency_hops(n: u64) -> f64 {
    if n <= 1 {
        0.0
    } else {
        (64 - (n - 1).leading_zeros()) as f64
    }
}

pub fn collective_time(c: &CollectiveOp, hw: &HardwareSpec) -> f64 {
    let n = c.group_size as f64;
    let bw = link_bandwidth(c.interconnect, hw);
    let transfer = match c.kind {
        CollectiveKind::NoOp => return 0.0,
        CollectiveKind::AllReduce => 2.0 * (n - 1.0) / n * c.payload_bytes / bw,
        CollectiveKind::AllGather | CollectiveKind::ReduceScatter | CollectiveKind::AllToAll => {
            (n - 1.0) / n * c.payload_bytes / bw
        }
        CollectiveKind::PointToPoint => c.payload_bytes / bw,
    };
    transfer + hw.per_collective_latency * latency_hops(c.group_size)
}

/// Per-op shard context derived from the strategy.
struct Shards<'a> {
    model: &'a ModelSpec,
    tp: u64,
    ep: u64,
    batch: f64,
    context_len: f64,
    kv_share: f64,
}

impl<'a> Shards<'a> {
    fn new(model: &'a ModelSpec, ops: &[FusedOpDescriptor], s: &Strategy, context_len: u64) -> Self {
        let attn = s.op_dims[index_of(ops, FusedOp::AttnCore)];
        let kv_share = if attn == ShardDim::Dim1 { s.tp.min(model.num_kv_heads) } else { 1 };
        Self {
            model,
            tp: s.tp,
            ep: s.ep,
            batch: s.batch as f64,
            context_len: context_len as f64,
            kv_share: kv_share as f64,
        }
    }

    fn factor(&self, dim: ShardDim) -> f64 {
        if dim.is_sharded() {
            self.tp as f64
        } else {
            1.0
        }
    }

    fn local_experts(&self) -> f64 {
        self.model.num_experts.div_ceil(self.ep) as f64
    }

    fn routed_tokens(&self) -> f64 {
        self.batch * self.model.experts_per_token as f64 / self.ep as f64
    }

    /// Bytes of one op's weights resident on a device.
    fn weight_bytes(&self, op: &FusedOpDescriptor, dim: ShardDim) -> f64 {
        let (rows, cols) = op.weight_shape;
        let dt = self.model.dtype_bytes as f64;
        let instances = match op.op_class {
            OpClass::MoeMatmul => self.local_experts(),
            _ => op.instances as f64,
        };
        (rows * cols) as f64 * dt * instances / self.factor(dim)
    }

    /// KV-cache bytes held per device for one layer.
    fn kv_bytes_per_layer(&self) -> f64 {
        self.model.kv_bytes_per_token_layer() * self.context_len * self.batch / self.kv_share
    }

    /// (flops, bytes moved) for one op in one decode step.
    fn op_cost(&self, op: &FusedOpDescriptor, dim: ShardDim) -> (f64, f64) {
        let m = self.model;
        let dt = m.dtype_bytes as f64;
        let s = self.factor(dim);
        let (rows, cols) = (op.weight_shape.0 as f64, op.weight_shape.1 as f64);
        let matmul = |tokens: f64, weight_copies: f64| {
            let (k_in, n_out) = match dim {
                ShardDim::Dim0 => (rows / s, cols),
                ShardDim::Dim1 => (rows, cols / s),
                ShardDim::Unsharded => (rows, cols),
            };
            let flops = 2.0 * tokens * rows * cols / s;
            let bytes = weight_copies * rows * cols * dt / s + tokens * (k_in + n_out) * dt;
            (flops, bytes)
        };
        match (op.op, op.op_class) {
            (FusedOp::Embedding, _) => {
                let width = if dim == ShardDim::Dim1 { cols / s } else { cols };
                (0.0, self.batch * width * dt)
            }
            (_, OpClass::DenseMatmul) => matmul(self.batch, op.instances as f64),
            (_, OpClass::MoeMatmul) => {
                let tokens = self.routed_tokens();
                let active = self.local_experts().min(tokens.ceil());
                matmul(tokens, active)
            }
            (_, OpClass::AttentionCore) => {
                let heads = (m.num_heads * m.head_dim) as f64;
                let flops = 4.0 * self.batch * heads * self.context_len / s;
                let bytes = self.batch * self.context_len * m.kv_bytes_per_token_layer() / self.kv_share
                    + 2.0 * self.batch * heads * dt / s;
                (flops, bytes)
            }
            (_, OpClass::Router) => {
                let flops = 2.0 * self.batch * rows * cols;
                (flops, rows * cols * dt + self.batch * (rows + cols) * dt)
            }
            (FusedOp::KvCacheIo, _) => (0.0, self.batch * m.kv_bytes_per_token_layer() / self.kv_share),
            (_, OpClass::Elementwise) => {
                let h = m.hidden_dim as f64;
                (4.0 * self.batch * h, 2.0 * self.batch * h * dt + h * dt)
            }
        }
    }
}

fn index_of(ops: &[FusedOpDescriptor], op: FusedOp) -> usize {
    ops.iter().position(|d| d.op == op).expect("canonical op missing")
}

/// Compute and communication seconds of one plan.
fn plan_time(plan: &LayerPlan, shards: &Shards, ops: &[FusedOpDescriptor], hw: &HardwareSpec) -> (f64, f64) {
    let mut compute = 0.0;
    let mut comm = 0.0;
    for step in &plan.steps {
        if let (Some(op), Some(dim)) = (step.op, step.dim) {
            let desc = &ops[index_of(ops, op)];
            let (flops, bytes) = shards.op_cost(desc, dim);
            compute += op_time(flops, bytes, hw);
        }
        for c in &step.collectives {
            comm += collective_time(c, hw);
        }
    }
    (compute, comm)
}

/// Layers per pipeline stage; the first `layers % pp` stages take one extra.
pub fn stage_layers(num_layers: u64, pp: u64) -> Vec<u64> {
    let base = num_layers / pp;
    let extra = num_layers % pp;
    (0..pp).map(|i| base + u64::from(i < extra)).collect()
}

/// Worst-stage memory footprint of a device.
pub fn memory_per_device(
    model: &ModelSpec,
    ops: &[FusedOpDescriptor],
    s: &Strategy,
    context_len: u64,
    workspace_bytes: f64,
) -> MemoryBreakdown {
    let shards = Shards::new(model, ops, s, context_len);
    let mut layer_weights = 0.0;
    let mut first_stage = 0.0;
    let mut last_stage = 0.0;
    for (op, &dim) in ops.iter().zip(&s.op_dims) {
        let w = shards.weight_bytes(op, dim);
        match op.op {
            _ if op.per_layer => layer_weights += w,
            FusedOp::Embedding => first_stage += w,
            _ => last_stage += w,
        }
    }
    let kv = shards.kv_bytes_per_layer();
    let layers = stage_layers(model.num_layers, s.pp);
    let last = layers.len() - 1;
    layers
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut weights = n as f64 * layer_weights;
            if i == 0 {
                weights += first_stage;
            }
            if i == last {
                weights += last_stage;
            }
            MemoryBreakdown { weights, kv_cache: n as f64 * kv, workspace: workspace_bytes }
        })
        .max_by(|a, b| a.total().total_cmp(&b.total()))
        .unwrap_or_default()
}

/// Plans for the prologue, one layer, and the epilogue.
pub fn plan_model(req: &SimRequest) -> Result<[LayerPlan; 3], LayoutError> {
    let s = req.strategy;
    if s.pp > req.model.num_layers {
        return Err(LayoutError::TooManyStages { pp: s.pp, layers: req.model.num_layers });
    }
    if s.ep > req.model.num_experts {
        return Err(LayoutError::TooManyExpertGroups { ep: s.ep, experts: req.model.num_experts });
    }
    let planner = LayerPlanner {
        model: req.model,
        ops: req.ops,
        dims: &s.op_dims,
        tp: s.tp,
        ep: s.ep,
        batch_tokens: s.batch,
        node_size: req.hw.node_size,
    };
    Ok([planner.prologue()?, planner.layer()?, planner.epilogue()?])
}

pub fn simulate(req: &SimRequest) -> SimResult {
    let s = req.strategy;
    let hw = req.hw;
    assert_eq!(s.op_dims.len(), req.ops.len(), "strategy must carry one dim per op");

    if s.world_size() > hw.device_budget {
        return SimResult::invalid(InvalidReason::OverDeviceBudget);
    }
    let [prologue, layer, epilogue] = match plan_model(req) {
        Ok(plans) => plans,
        Err(e) => {
            let mut r = SimResult::invalid(InvalidReason::LayoutError);
            r.layout_error = Some(e.to_string());
            return r;
        }
    };

    let shards = Shards::new(req.model, req.ops, s, req.context_len);
    let (pro_compute, pro_comm) = plan_time(&prologue, &shards, req.ops, hw);
    let (layer_compute, layer_comm) = plan_time(&layer, &shards, req.ops, hw);
    let (epi_compute, epi_comm) = plan_time(&epilogue, &shards, req.ops, hw);

    let layers = stage_layers(req.model.num_layers, s.pp);
    let last = layers.len() - 1;
    let mut compute_s = 0.0;
    let mut comm_s = 0.0;
    let mut max_stage = 0.0f64;
    for (i, &n) in layers.iter().enumerate() {
        let mut c = n as f64 * layer_compute;
        let mut k = n as f64 * layer_comm;
        if i == 0 {
            c += pro_compute;
            k += pro_comm;
        }
        if i == last {
            c += epi_compute;
            k += epi_comm;
        }
        compute_s += c;
        comm_s += k;
        max_stage = max_stage.max(c + k);
    }
    let p2p = CollectiveOp {
        kind: CollectiveKind::PointToPoint,
        payload_bytes: s.batch as f64 * (req.model.hidden_dim * req.model.dtype_bytes) as f64,
        group_size: 2,
        interconnect: Interconnect::for_span(s.world_size(), hw.node_size),
        group: CommGroup::Pp,
    };
    let pipeline_s = (s.pp - 1) as f64 * collective_time(&p2p, hw);
    let breakdown = TimeBreakdown { compute_s, comm_s, pipeline_s };
    let tpot = breakdown.compute_s + breakdown.comm_s + breakdown.pipeline_s;
    let mem = memory_per_device(req.model, req.ops, s, req.context_len, req.workspace_bytes).total();

    let mut result = SimResult {
        valid: false,
        invalid_reason: InvalidReason::None,
        throughput: 0.0,
        tpot,
        mem_per_device: mem,
        time_breakdown: breakdown,
        layout_error: None,
    };
    if mem > hw.hbm_capacity {
        result.invalid_reason = InvalidReason::Oom;
    } else if tpot > req.slo_tpot {
        result.invalid_reason = InvalidReason::SloViolation;
    } else {
        result.valid = true;
        result.throughput = s.batch as f64 / max_stage / s.world_size() as f64;
    }
    result
}
