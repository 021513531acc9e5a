//! Joint search over parallelism degrees and per-operator sharding
//! dimensions for distributed MoE decode, scored by a roofline simulator.

pub mod baselines;
pub mod config;
pub mod env;
pub mod error;
pub mod layout;
pub mod policy;
pub mod ppo;
pub mod runner;
pub mod search;
pub mod sim;
pub mod strategy;
pub mod workload;

pub use env::{EvalRecord, RewardConfig, SearchEnv, Selection, StepOutcome};
pub use error::{ConfigError, EnvError, LayoutError, PolicyError, RunError, SearchError, StrategyError};
pub use layout::{CollectiveKind, CollectiveOp, LayerPlan, TensorLayout};
pub use sim::{simulate, InvalidReason, SimRequest, SimResult};
pub use strategy::{ActionSpace, FusedOp, FusedOpDescriptor, HardwareSpec, ModelSpec, ShardDim, Strategy};
pub use workload::Workload;
