//! Models, hardware, fused operators and the joint strategy encoding.
//!
//! A [`Strategy`] is the coarse tuple (TP, EP, PP, batch) plus one shard
//! choice per searched fused operator. The [`ActionSpace`] maps strategies to
//! integer index vectors of length `4 + L` and back.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::StrategyError;

/// Number of shard choices per fused operator: Unsharded, Dim0, Dim1.
pub const DIM_CHOICES: usize = 3;

/// Number of coarse sub-actions (tp, ep, pp, batch) at the front of an action vector.
pub const COARSE_HEADS: usize = 4;

/// Per-operator sharding choice. The discriminant is the action index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShardDim {
    Unsharded,
    Dim0,
    Dim1,
}

impl ShardDim {
    pub const ALL: [ShardDim; DIM_CHOICES] = [ShardDim::Unsharded, ShardDim::Dim0, ShardDim::Dim1];

    pub fn index(self) -> usize {
        match self {
            ShardDim::Unsharded => 0,
            ShardDim::Dim0 => 1,
            ShardDim::Dim1 => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_sharded(self) -> bool {
        self != ShardDim::Unsharded
    }
}

impl fmt::Display for ShardDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShardDim::Unsharded => "-",
            ShardDim::Dim0 => "0",
            ShardDim::Dim1 => "1",
        })
    }
}

/// An MoE transformer decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u64,
    pub hidden_dim: u64,
    /// Intermediate width of one expert (also used for the shared expert).
    pub ffn_dim: u64,
    pub num_heads: u64,
    pub head_dim: u64,
    pub num_kv_heads: u64,
    pub num_experts: u64,
    pub experts_per_token: u64,
    pub vocab_size: u64,
    pub dtype_bytes: u64,
    pub has_shared_expert: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), StrategyError> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("num_kv_heads", self.num_kv_heads),
            ("num_experts", self.num_experts),
            ("experts_per_token", self.experts_per_token),
            ("vocab_size", self.vocab_size),
            ("dtype_bytes", self.dtype_bytes),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(StrategyError::InvalidModel(format!("{field} must be >= 1")));
            }
        }
        if self.hidden_dim != self.num_heads * self.head_dim {
            return Err(StrategyError::InvalidModel(format!(
                "hidden_dim {} != num_heads {} x head_dim {}",
                self.hidden_dim, self.num_heads, self.head_dim
            )));
        }
        if self.num_heads % self.num_kv_heads != 0 {
            return Err(StrategyError::InvalidModel(format!(
                "num_kv_heads {} does not divide num_heads {}",
                self.num_kv_heads, self.num_heads
            )));
        }
        if self.experts_per_token > self.num_experts {
            return Err(StrategyError::InvalidModel(format!(
                "experts_per_token {} exceeds num_experts {}",
                self.experts_per_token, self.num_experts
            )));
        }
        Ok(())
    }

    /// Total parameter count over the fused operators of the model.
    pub fn param_count(&self) -> u64 {
        canonical_ops(self)
            .iter()
            .map(|op| {
                let per_instance = op.weight_shape.0 * op.weight_shape.1 * op.instances;
                if op.per_layer {
                    per_instance * self.num_layers
                } else {
                    per_instance
                }
            })
            .sum()
    }

    /// Bytes of K and V for one token in one layer (unsharded).
    pub fn kv_bytes_per_token_layer(&self) -> f64 {
        (2 * self.num_kv_heads * self.head_dim * self.dtype_bytes) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSpec {
    pub name: String,
    /// FLOP/s per device.
    pub peak_flops: f64,
    /// Bytes/s per device.
    pub hbm_bandwidth: f64,
    /// Bytes per device.
    pub hbm_capacity: f64,
    pub intra_node_bw: f64,
    pub inter_node_bw: f64,
    pub node_size: u64,
    pub device_budget: u64,
    /// Seconds per latency hop of a collective.
    pub per_collective_latency: f64,
    /// Fixed launch cost per fused operator, seconds.
    pub kernel_overhead: f64,
}

impl HardwareSpec {
    pub fn validate(&self) -> Result<(), StrategyError> {
        let rates = [
            ("peak_flops", self.peak_flops),
            ("hbm_bandwidth", self.hbm_bandwidth),
            ("hbm_capacity", self.hbm_capacity),
            ("intra_node_bw", self.intra_node_bw),
            ("inter_node_bw", self.inter_node_bw),
        ];
        for (field, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(StrategyError::InvalidHardware(format!("{field} must be > 0")));
            }
        }
        if self.node_size == 0 || self.device_budget == 0 {
            return Err(StrategyError::InvalidHardware("node_size and device_budget must be >= 1".into()));
        }
        if self.per_collective_latency < 0.0 || self.kernel_overhead < 0.0 {
            return Err(StrategyError::InvalidHardware("latencies must be >= 0".into()));
        }
        Ok(())
    }
}

/// The joint parallelization strategy.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Strategy {
    pub tp: u64,
    pub ep: u64,
    pub pp: u64,
    pub batch: u64,
    /// One choice per searched fused operator, in action-space order.
    pub op_dims: Vec<ShardDim>,
}

impl Strategy {
    pub fn world_size(&self) -> u64 {
        world_size(self.tp, self.ep, self.pp)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tp={} ep={} pp={} batch={} dims=[", self.tp, self.ep, self.pp, self.batch)?;
        for d in &self.op_dims {
            write!(f, "{d}")?;
        }
        f.write_str("]")
    }
}

pub fn world_size(tp: u64, ep: u64, pp: u64) -> u64 {
    tp * ep * pp
}

/// Finite domains of every sub-action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSpace {
    pub tp_domain: Vec<u64>,
    pub ep_domain: Vec<u64>,
    pub pp_domain: Vec<u64>,
    pub batch_domain: Vec<u64>,
    pub num_ops: usize,
}

impl ActionSpace {
    pub fn new(
        tp_domain: Vec<u64>,
        ep_domain: Vec<u64>,
        pp_domain: Vec<u64>,
        batch_domain: Vec<u64>,
        num_ops: usize,
    ) -> Result<Self, StrategyError> {
        let space = Self { tp_domain, ep_domain, pp_domain, batch_domain, num_ops };
        space.validate()?;
        Ok(space)
    }

    /// Powers of two for TP/EP/PP up to 64 and batch up to 1024.
    pub fn default_domains(num_ops: usize) -> Self {
        let pow2 = |max_exp: u32| (0..=max_exp).map(|e| 1u64 << e).collect::<Vec<_>>();
        Self { tp_domain: pow2(6), ep_domain: pow2(6), pp_domain: pow2(6), batch_domain: pow2(10), num_ops }
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        for (name, dom) in self.coarse_domains() {
            if dom.is_empty() {
                return Err(StrategyError::InvalidSpace(format!("{name} is empty")));
            }
            if dom.windows(2).any(|w| w[0] >= w[1]) {
                return Err(StrategyError::InvalidSpace(format!("{name} is not strictly increasing")));
            }
            if dom[0] == 0 {
                return Err(StrategyError::InvalidSpace(format!("{name} contains 0")));
            }
        }
        Ok(())
    }

    fn coarse_domains(&self) -> [(&'static str, &[u64]); COARSE_HEADS] {
        [("tp", &self.tp_domain), ("ep", &self.ep_domain), ("pp", &self.pp_domain), ("batch", &self.batch_domain)]
    }

    /// Action vector length `A = 4 + L`.
    pub fn action_len(&self) -> usize {
        COARSE_HEADS + self.num_ops
    }

    /// Number of choices for every sub-action, in action order.
    pub fn head_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.coarse_domains().iter().map(|(_, d)| d.len()).collect();
        sizes.extend(std::iter::repeat_n(DIM_CHOICES, self.num_ops));
        sizes
    }

    /// Size of the full joint domain product, as a float (it overflows u64 for large L).
    pub fn cardinality(&self) -> f64 {
        self.head_sizes().iter().map(|&s| s as f64).product()
    }

    pub fn encode(&self, s: &Strategy) -> Result<Vec<usize>, StrategyError> {
        if s.op_dims.len() != self.num_ops {
            return Err(StrategyError::WrongLength { expected: self.num_ops, got: s.op_dims.len() });
        }
        let mut v = Vec::with_capacity(self.action_len());
        for ((name, dom), value) in self.coarse_domains().into_iter().zip([s.tp, s.ep, s.pp, s.batch]) {
            let idx = dom.iter().position(|&d| d == value).ok_or_else(|| StrategyError::NotInDomain {
                field: name,
                value,
                allowed: dom.to_vec(),
            })?;
            v.push(idx);
        }
        v.extend(s.op_dims.iter().map(|d| d.index()));
        Ok(v)
    }

    pub fn decode(&self, v: &[usize]) -> Result<Strategy, StrategyError> {
        if v.len() != self.action_len() {
            return Err(StrategyError::WrongLength { expected: self.action_len(), got: v.len() });
        }
        let doms = self.coarse_domains();
        let mut coarse = [0u64; COARSE_HEADS];
        for (m, (name, dom)) in doms.iter().enumerate() {
            coarse[m] = *dom.get(v[m]).ok_or(StrategyError::IndexOutOfRange {
                head: name.to_string(),
                index: v[m],
                size: dom.len(),
            })?;
        }
        let op_dims = v[COARSE_HEADS..]
            .iter()
            .enumerate()
            .map(|(l, &i)| {
                ShardDim::from_index(i).ok_or(StrategyError::IndexOutOfRange {
                    head: format!("op{l}"),
                    index: i,
                    size: DIM_CHOICES,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Strategy { tp: coarse[0], ep: coarse[1], pp: coarse[2], batch: coarse[3], op_dims })
    }
}

/// The twelve canonical fused operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusedOp {
    QkvProj,
    AttnCore,
    AttnOutProj,
    RouterGate,
    ExpertFfn1,
    ExpertFfn2,
    SharedFfn1,
    SharedFfn2,
    Embedding,
    FinalNorm,
    LmHead,
    KvCacheIo,
}

impl FusedOp {
    pub const CANONICAL: [FusedOp; 12] = [
        FusedOp::QkvProj,
        FusedOp::AttnCore,
        FusedOp::AttnOutProj,
        FusedOp::RouterGate,
        FusedOp::ExpertFfn1,
        FusedOp::ExpertFfn2,
        FusedOp::SharedFfn1,
        FusedOp::SharedFfn2,
        FusedOp::Embedding,
        FusedOp::FinalNorm,
        FusedOp::LmHead,
        FusedOp::KvCacheIo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusedOp::QkvProj => "qkv_proj",
            FusedOp::AttnCore => "attn_core",
            FusedOp::AttnOutProj => "attn_out_proj",
            FusedOp::RouterGate => "router_gate",
            FusedOp::ExpertFfn1 => "expert_ffn1",
            FusedOp::ExpertFfn2 => "expert_ffn2",
            FusedOp::SharedFfn1 => "shared_ffn1",
            FusedOp::SharedFfn2 => "shared_ffn2",
            FusedOp::Embedding => "embedding",
            FusedOp::FinalNorm => "final_norm",
            FusedOp::LmHead => "lm_head",
            FusedOp::KvCacheIo => "kv_cache_io",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::CANONICAL.into_iter().find(|op| op.name() == name)
    }

    /// Position in [`FusedOp::CANONICAL`].
    pub fn canonical_index(self) -> usize {
        Self::CANONICAL.iter().position(|&o| o == self).unwrap()
    }
}

impl fmt::Display for FusedOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpClass {
    DenseMatmul,
    AttentionCore,
    Router,
    MoeMatmul,
    Elementwise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedOpDescriptor {
    pub op: FusedOp,
    pub op_class: OpClass,
    /// (rows, cols) of one weight instance; rows are the contraction axis.
    pub weight_shape: (u64, u64),
    /// Weight instances held by the model per layer (experts for MoE matmuls).
    pub instances: u64,
    /// Admissible sharded axes. Unsharded is always admissible.
    pub shardable_axes: Vec<ShardDim>,
    pub per_layer: bool,
}

impl FusedOpDescriptor {
    pub fn name(&self) -> &'static str {
        self.op.name()
    }

    pub fn admits(&self, dim: ShardDim) -> bool {
        dim == ShardDim::Unsharded || self.shardable_axes.contains(&dim)
    }

    /// True when the op has no sharded choice, so its action head is a no-op.
    pub fn only_unsharded(&self) -> bool {
        self.shardable_axes.is_empty()
    }
}

/// The canonical L=12 fused-op list for `model`, in action order.
///
/// Shared-expert ops lose their shardable axes when the model has no shared
/// expert, which turns their heads into no-ops.
pub fn canonical_ops(model: &ModelSpec) -> Vec<FusedOpDescriptor> {
    let h = model.hidden_dim;
    let f = model.ffn_dim;
    let q = model.num_heads * model.head_dim;
    let kv = model.num_kv_heads * model.head_dim;
    let both = vec![ShardDim::Dim0, ShardDim::Dim1];
    let shared = if model.has_shared_expert { 1 } else { 0 };
    let desc = |op, op_class, weight_shape, instances, shardable_axes: Vec<ShardDim>, per_layer| FusedOpDescriptor {
        op,
        op_class,
        weight_shape,
        instances,
        shardable_axes,
        per_layer,
    };
    vec![
        desc(FusedOp::QkvProj, OpClass::DenseMatmul, (h, q + 2 * kv), 1, both.clone(), true),
        desc(FusedOp::AttnCore, OpClass::AttentionCore, (0, 0), 0, vec![ShardDim::Dim1], true),
        desc(FusedOp::AttnOutProj, OpClass::DenseMatmul, (q, h), 1, both.clone(), true),
        desc(FusedOp::RouterGate, OpClass::Router, (h, model.num_experts), 1, vec![], true),
        // gate and up projections are fused: 2f output columns
        desc(FusedOp::ExpertFfn1, OpClass::MoeMatmul, (h, 2 * f), model.num_experts, both.clone(), true),
        desc(FusedOp::ExpertFfn2, OpClass::MoeMatmul, (f, h), model.num_experts, both.clone(), true),
        desc(
            FusedOp::SharedFfn1,
            OpClass::DenseMatmul,
            (h, 2 * f),
            shared,
            if model.has_shared_expert { both.clone() } else { vec![] },
            true,
        ),
        desc(
            FusedOp::SharedFfn2,
            OpClass::DenseMatmul,
            (f, h),
            shared,
            if model.has_shared_expert { both.clone() } else { vec![] },
            true,
        ),
        desc(FusedOp::Embedding, OpClass::DenseMatmul, (model.vocab_size, h), 1, both.clone(), false),
        desc(FusedOp::FinalNorm, OpClass::Elementwise, (1, h), 1, vec![], false),
        desc(FusedOp::LmHead, OpClass::DenseMatmul, (h, model.vocab_size), 1, both, false),
        // K/V append for the new token; modeled once per layer
        desc(FusedOp::KvCacheIo, OpClass::Elementwise, (0, 0), 0, vec![], true),
    ]
}

/// Megatron tensor-parallel assignment for each op.
pub fn megatron_dim(op: &FusedOpDescriptor) -> ShardDim {
    let dim = match op.op {
        FusedOp::QkvProj | FusedOp::AttnCore => ShardDim::Dim1,
        FusedOp::AttnOutProj => ShardDim::Dim0,
        FusedOp::ExpertFfn1 | FusedOp::SharedFfn1 => ShardDim::Dim1,
        FusedOp::ExpertFfn2 | FusedOp::SharedFfn2 => ShardDim::Dim0,
        // vocab-parallel embedding
        FusedOp::Embedding => ShardDim::Dim0,
        FusedOp::LmHead => ShardDim::Dim1,
        FusedOp::RouterGate | FusedOp::FinalNorm | FusedOp::KvCacheIo => ShardDim::Unsharded,
    };
    if op.admits(dim) {
        dim
    } else {
        ShardDim::Unsharded
    }
}

pub fn megatron_fine_dims(ops: &[FusedOpDescriptor]) -> Vec<ShardDim> {
    ops.iter().map(megatron_dim).collect()
}
