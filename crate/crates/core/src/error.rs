use std::path::PathBuf;

use thiserror::Error;

use crate::strategy::ShardDim;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StrategyError {
    #[error("{field}={value} is not in the domain; allowed values: {allowed:?}")]
    NotInDomain { field: &'static str, value: u64, allowed: Vec<u64> },
    #[error("index {index} out of range for head {head} (size {size})")]
    IndexOutOfRange { head: String, index: usize, size: usize },
    #[error("expected {expected} entries, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid hardware: {0}")]
    InvalidHardware(String),
    #[error("invalid action space: {0}")]
    InvalidSpace(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayoutError {
    #[error("op {op}: shard choice {dim:?} is not admissible")]
    Inadmissible { op: &'static str, dim: ShardDim },
    #[error("op {op}: input layout {input} is incompatible with shard choice {dim:?}")]
    Incompatible { op: &'static str, input: String, dim: ShardDim },
    #[error("no collective turns {from} into {to}")]
    NoTransition { from: String, to: String },
    #[error("group size mismatch: {from} vs {to}")]
    GroupMismatch { from: u64, to: u64 },
    #[error("pipeline degree {pp} exceeds {layers} layers")]
    TooManyStages { pp: u64, layers: u64 },
    #[error("expert degree {ep} exceeds {experts} experts")]
    TooManyExpertGroups { ep: u64, experts: u64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("evaluation budget of {budget} exhausted")]
    BudgetExhausted { budget: usize },
    #[error("no evaluations logged")]
    NoEvaluations,
    #[error(transparent)]
    Decode(#[from] StrategyError),
    #[error("eval log write failed: {0}")]
    Log(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("observation shape {got:?} does not match expected {expected:?}")]
    Shape { expected: (usize, usize), got: (usize, usize) },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("exhaustive search found no valid configuration")]
    NoValidConfiguration,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Incompatible(String),
}
