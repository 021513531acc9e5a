//! Experiment configuration files.
//!
//! ```toml
//! model_file = "models/moe-1.2t.toml"     # or an inline [model] table
//! hardware_file = "hardware/h100.toml"    # or an inline [hardware] table
//!
//! [workload]
//! context_len = 16384
//! slo_tpot = 0.05
//! workspace_bytes = 2e9
//! budget = 4000
//! search_ops = ["qkv_proj", ...]          # optional, defaults to all ops
//! tp_domain = [1, 2, 4]                   # optional per-head domains
//!
//! [reward]
//! scale = 500.0                           # alpha, beta, invalid_penalty optional
//!
//! [ppo]                                   # optional overrides
//! [sa]
//! ```
//!
//! File references resolve relative to the referencing file. Unknown keys
//! are rejected.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::SaConfig;
use crate::env::{RewardConfig, SearchEnv};
use crate::error::ConfigError;
use crate::ppo::PpoConfig;
use crate::strategy::{ActionSpace, FusedOp, HardwareSpec, ModelSpec};
use crate::workload::{Workload, DEFAULT_SLO_TPOT};

pub const CONFIG_ENV_VAR: &str = "SHARDSEARCH_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub context_len: u64,
    #[serde(default = "default_slo")]
    pub slo_tpot: f64,
    #[serde(default)]
    pub workspace_bytes: f64,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default)]
    pub search_ops: Option<Vec<String>>,
    #[serde(default)]
    pub tp_domain: Option<Vec<u64>>,
    #[serde(default)]
    pub ep_domain: Option<Vec<u64>>,
    #[serde(default)]
    pub pp_domain: Option<Vec<u64>>,
    #[serde(default)]
    pub batch_domain: Option<Vec<u64>>,
}

fn default_slo() -> f64 {
    DEFAULT_SLO_TPOT
}

fn default_budget() -> usize {
    4000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    pub scale: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    /// Defaults to `-scale`.
    #[serde(default)]
    pub invalid_penalty: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl RewardSection {
    pub fn to_config(self) -> RewardConfig {
        RewardConfig {
            alpha: self.alpha,
            beta: self.beta,
            invalid_penalty: self.invalid_penalty.unwrap_or(-self.scale),
            scale: self.scale,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: Option<ModelSpec>,
    model_file: Option<PathBuf>,
    hardware: Option<HardwareSpec>,
    hardware_file: Option<PathBuf>,
    workload: WorkloadSection,
    reward: RewardSection,
    #[serde(default)]
    ppo: PpoConfig,
    #[serde(default)]
    sa: SaConfig,
}

/// A fully resolved experiment, with file references inlined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub hardware: HardwareSpec,
    pub workload: WorkloadSection,
    pub reward: RewardSection,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub sa: SaConfig,
}

fn parse_err(path: &Path, message: impl ToString) -> ConfigError {
    ConfigError::Parse { path: path.to_path_buf(), message: message.to_string() }
}

fn invalid(path: &Path, message: impl ToString) -> ConfigError {
    ConfigError::Invalid { path: path.to_path_buf(), message: message.to_string() }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
}

fn load_part<T: serde::de::DeserializeOwned>(
    inline: Option<T>,
    file: Option<PathBuf>,
    base: &Path,
    path: &Path,
    what: &str,
) -> Result<T, ConfigError> {
    match (inline, file) {
        (Some(v), None) => Ok(v),
        (None, Some(rel)) => {
            let p = base.join(rel);
            toml::from_str(&read(&p)?).map_err(|e| parse_err(&p, e))
        }
        (Some(_), Some(_)) => Err(invalid(path, format!("both [{what}] and {what}_file given"))),
        (None, None) => Err(invalid(path, format!("missing [{what}] or {what}_file"))),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, path)
    }

    /// Parses config text; `base` resolves file references and `path` labels errors.
    pub fn parse(text: &str, base: &Path, path: &Path) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| parse_err(path, e))?;
        let cfg = Self {
            model: load_part(raw.model, raw.model_file, base, path, "model")?,
            hardware: load_part(raw.hardware, raw.hardware_file, base, path, "hardware")?,
            workload: raw.workload,
            reward: raw.reward,
            ppo: raw.ppo,
            sa: raw.sa,
        };
        cfg.validate().map_err(|m| invalid(path, m))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.build_workload().map_err(|e| e.to_string())?;
        self.reward_config().validate().map_err(|m| format!("reward: {m}"))?;
        self.ppo.validate().map_err(|m| format!("ppo: {m}"))?;
        self.sa.validate().map_err(|m| format!("sa: {m}"))?;
        if self.workload.budget == 0 {
            return Err("workload.budget must be >= 1".into());
        }
        Ok(())
    }

    pub fn search_ops(&self) -> Result<Vec<FusedOp>, String> {
        match &self.workload.search_ops {
            None => Ok(FusedOp::CANONICAL.to_vec()),
            Some(names) => names
                .iter()
                .map(|n| FusedOp::from_name(n).ok_or_else(|| format!("workload.search_ops: unknown op {n:?}")))
                .collect(),
        }
    }

    pub fn action_space(&self) -> Result<ActionSpace, String> {
        let ops = self.search_ops()?;
        let d = ActionSpace::default_domains(ops.len());
        let w = &self.workload;
        let space = ActionSpace {
            tp_domain: w.tp_domain.clone().unwrap_or(d.tp_domain),
            ep_domain: w.ep_domain.clone().unwrap_or(d.ep_domain),
            pp_domain: w.pp_domain.clone().unwrap_or(d.pp_domain),
            batch_domain: w.batch_domain.clone().unwrap_or(d.batch_domain),
            num_ops: ops.len(),
        };
        space.validate().map_err(|e| e.to_string())?;
        Ok(space)
    }

    pub fn build_workload(&self) -> Result<Workload, String> {
        let w = &self.workload;
        Workload::with_space(
            self.model.clone(),
            self.hardware.clone(),
            self.action_space()?,
            self.search_ops()?,
            w.context_len,
            w.slo_tpot,
            w.workspace_bytes,
        )
        .map_err(|e| e.to_string())
    }

    pub fn reward_config(&self) -> RewardConfig {
        self.reward.to_config()
    }

    /// A fresh env with the configured budget.
    pub fn env(&self) -> Result<SearchEnv, String> {
        Ok(SearchEnv::new(Arc::new(self.build_workload()?), self.reward_config(), self.workload.budget))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
