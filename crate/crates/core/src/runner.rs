//! Run directories: seeded multi-run sweeps and the reports built from them.
//!
//! ```text
//! out/
//!   config.toml                 resolved config snapshot
//!   <algo>/seed-<k>/evals.jsonl append-only eval log
//!   <algo>/seed-<k>/report.json SearchReport
//!   summary.json, summary.csv
//! ```
//!
//! Every number in a summary or report is recomputed from the eval logs.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::baselines::{megatron_exhaustive, random_walk, simulated_annealing};
use crate::config::ExperimentConfig;
use crate::env::{EvalRecord, SearchEnv};
use crate::error::{RunError, SearchError};
use crate::ppo::run_search;
use crate::search::SearchReport;
use crate::strategy::COARSE_HEADS;
use crate::workload::Workload;

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const EVAL_LOG: &str = "evals.jsonl";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Ppo,
    Sa,
    Rw,
    Exhaustive,
}

impl Algo {
    pub const ALL: [Algo; 4] = [Algo::Ppo, Algo::Sa, Algo::Rw, Algo::Exhaustive];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Ppo => "ppo",
            Algo::Sa => "sa",
            Algo::Rw => "rw",
            Algo::Exhaustive => "exhaustive",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm {s:?} (expected ppo, sa, rw or exhaustive)"))
    }
}

/// Runs one search on a fresh env, optionally streaming the eval log.
/// Exhaustive always gets a budget of exactly the coarse grid size.
pub fn run_one(
    cfg: &ExperimentConfig,
    workload: &Arc<Workload>,
    algo: Algo,
    budget: usize,
    seed: u64,
    sink: Option<Box<dyn std::io::Write + Send>>,
) -> Result<SearchReport, SearchError> {
    let budget = match algo {
        Algo::Exhaustive => workload.space.head_sizes()[..COARSE_HEADS].iter().product(),
        _ => budget,
    };
    let mut env = SearchEnv::new(Arc::clone(workload), cfg.reward_config(), budget);
    if let Some(sink) = sink {
        env = env.with_sink(sink);
    }
    match algo {
        Algo::Ppo => run_search(&mut env, &cfg.ppo, seed),
        Algo::Sa => simulated_annealing(&mut env, &cfg.sa, seed),
        Algo::Rw => random_walk(&mut env, seed),
        Algo::Exhaustive => megatron_exhaustive(&mut env),
    }
}

#[derive(Debug, Clone)]
pub struct SearchArgs {
    pub algos: Vec<Algo>,
    /// Overrides the config's budget.
    pub budget: Option<usize>,
    pub seeds: usize,
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct SearchOutcome {
    pub reports: Vec<SearchReport>,
    pub summary: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl ToString) -> RunError {
    RunError::Format { path: path.to_path_buf(), message: message.to_string() }
}

/// Runs every (algo, seed) pair into `args.out`, then writes the summary.
///
/// An existing run directory may be extended with new algorithms as long as
/// its config snapshot matches; existing seed directories are never reused.
pub fn cmd_search(cfg: &ExperimentConfig, args: &SearchArgs) -> Result<SearchOutcome, RunError> {
    let mut warnings = Vec::new();
    if args.seeds == 0 {
        return Err(RunError::Incompatible("--seeds must be >= 1".into()));
    }
    if args.budget == Some(0) {
        return Err(RunError::Incompatible("--budget must be >= 1".into()));
    }
    let mut cfg = cfg.clone();
    if let Some(b) = args.budget {
        cfg.workload.budget = b;
    }
    let workload = Arc::new(cfg.build_workload().map_err(RunError::Incompatible)?);

    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let snapshot = args.out.join(CONFIG_SNAPSHOT);
    let text = cfg.to_toml();
    if snapshot.exists() {
        let old = ExperimentConfig::load(&snapshot)?;
        if !same_problem(&old, &cfg) || old.reward != cfg.reward || old.ppo != cfg.ppo || old.sa != cfg.sa {
            return Err(RunError::Incompatible(format!(
                "{} holds a different config; use a fresh --out directory",
                snapshot.display()
            )));
        }
    } else {
        fs::write(&snapshot, &text).map_err(io_err(&snapshot))?;
    }

    let mut plan = Vec::new();
    for &algo in &args.algos {
        let seeds: Vec<u64> = if algo == Algo::Exhaustive {
            if args.seeds != 1 || args.budget.is_some() {
                warnings.push(
                    "exhaustive is deterministic and sweeps the full coarse grid; ignoring --budget and --seeds".into(),
                );
            }
            vec![0]
        } else {
            (0..args.seeds as u64).collect()
        };
        for seed in seeds {
            let dir = seed_dir(&args.out, algo, seed);
            if dir.exists() {
                return Err(RunError::Incompatible(format!("{} already exists; refusing to overwrite", dir.display())));
            }
            plan.push((algo, seed, dir));
        }
    }

    let mut reports = Vec::new();
    for (algo, seed, dir) in plan {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let log_path = dir.join(EVAL_LOG);
        let log = OpenOptions::new().write(true).create_new(true).open(&log_path).map_err(io_err(&log_path))?;
        let report = run_one(&cfg, &workload, algo, cfg.workload.budget, seed, Some(Box::new(BufWriter::new(log))))?;
        let report_path = dir.join(REPORT_FILE);
        let json = serde_json::to_string_pretty(&report).map_err(|e| format_err(&report_path, e))?;
        fs::write(&report_path, json).map_err(io_err(&report_path))?;
        reports.push(report);
    }

    let run = RunDir::load(&args.out)?;
    let summary = summarize(std::slice::from_ref(&run))?;
    write_summary(&args.out, &summary)?;
    Ok(SearchOutcome { reports, summary, warnings })
}

pub fn seed_dir(out: &Path, algo: Algo, seed: u64) -> PathBuf {
    out.join(algo.name()).join(format!("seed-{seed}"))
}

/// Configs describe the same search problem if everything that affects raw
/// throughput matches; budgets and learner settings may differ.
fn same_problem(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    let mut wa = a.workload.clone();
    let mut wb = b.workload.clone();
    wa.budget = 0;
    wb.budget = 0;
    a.model == b.model && a.hardware == b.hardware && wa == wb
}

/// Reads an eval log. A truncated final line from an interrupted run is
/// dropped; any other malformed line is an error.
pub fn read_eval_log(path: &Path) -> Result<Vec<EvalRecord>, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str::<EvalRecord>(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !complete => break,
            Err(e) => return Err(format_err(path, format!("line {}: {e}", i + 1))),
        }
    }
    Ok(out)
}

/// Best valid raw throughput over a log.
pub fn best_raw(log: &[EvalRecord]) -> f64 {
    log.iter().filter(|r| r.valid).map(|r| r.raw).fold(0.0, f64::max)
}

/// Per-eval best-so-far valid raw throughput.
pub fn best_so_far(log: &[EvalRecord]) -> Vec<f64> {
    let mut best = 0.0f64;
    log.iter()
        .map(|r| {
            if r.valid {
                best = best.max(r.raw);
            }
            best
        })
        .collect()
}

/// Re-simulates every logged action and returns the indices whose validity
/// or raw throughput differs from the log.
pub fn replay_mismatches(workload: &Workload, log: &[EvalRecord]) -> Vec<usize> {
    log.iter()
        .filter(|r| match workload.space.decode(&r.action) {
            Ok(s) => {
                let sim = workload.simulate(&s);
                let raw = if sim.valid { sim.throughput } else { 0.0 };
                sim.valid != r.valid || raw.to_bits() != r.raw.to_bits()
            }
            Err(_) => true,
        })
        .map(|r| r.eval)
        .collect()
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub log: Vec<EvalRecord>,
}

/// A run directory loaded back from disk.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
    pub config: ExperimentConfig,
    pub workload_key: String,
    pub runs: BTreeMap<Algo, Vec<SeedRun>>,
}

impl RunDir {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let config = ExperimentConfig::load(&path.join(CONFIG_SNAPSHOT))?;
        let workload_key = config.build_workload().map_err(|m| format_err(path, m))?.key();
        let mut runs = BTreeMap::new();
        for algo in Algo::ALL {
            let adir = path.join(algo.name());
            if !adir.is_dir() {
                continue;
            }
            let mut seeds = Vec::new();
            for entry in fs::read_dir(&adir).map_err(io_err(&adir))? {
                let entry = entry.map_err(io_err(&adir))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                let Some(seed) = name.strip_prefix("seed-").and_then(|s| s.parse::<u64>().ok()) else {
                    continue;
                };
                let log_path = entry.path().join(EVAL_LOG);
                if !log_path.exists() {
                    continue;
                }
                seeds.push(SeedRun { seed, log: read_eval_log(&log_path)? });
            }
            seeds.sort_by_key(|s| s.seed);
            if !seeds.is_empty() {
                runs.insert(algo, seeds);
            }
        }
        if runs.is_empty() {
            return Err(format_err(path, "no eval logs found"));
        }
        Ok(Self { path: path.to_path_buf(), config, workload_key, runs })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub workload: String,
    pub algorithm: String,
    pub seeds: usize,
    pub evals: usize,
    pub mean_best_raw: f64,
    pub best_of_k: f64,
    /// Mean best raw over random walk's mean best raw.
    pub vs_rw: Option<f64>,
    /// Best-of-k over the exhaustive Megatron baseline's best raw.
    pub vs_megatron: Option<f64>,
    pub best_strategy: Option<String>,
}

/// One row per (workload, algorithm) across run directories.
///
/// Directories sharing a workload key must describe the same problem, and a
/// (workload, algorithm) pair may come from only one directory.
pub fn summarize(dirs: &[RunDir]) -> Result<Vec<SummaryRow>, RunError> {
    let mut by_key: BTreeMap<&str, Vec<&RunDir>> = BTreeMap::new();
    for d in dirs {
        by_key.entry(d.workload_key.as_str()).or_default().push(d);
    }
    let mut rows = Vec::new();
    for (key, group) in by_key {
        let first = group[0];
        for other in &group[1..] {
            if !same_problem(&first.config, &other.config) {
                return Err(RunError::Incompatible(format!(
                    "{} and {} both describe {key} but with different model, hardware or workload settings",
                    first.path.display(),
                    other.path.display()
                )));
            }
        }
        let workload = first.config.build_workload().map_err(RunError::Incompatible)?;
        let mut merged: BTreeMap<Algo, &[SeedRun]> = BTreeMap::new();
        for d in &group {
            for (algo, seeds) in &d.runs {
                if merged.insert(*algo, seeds).is_some() {
                    return Err(RunError::Incompatible(format!("{key}/{algo} appears in more than one run directory")));
                }
            }
        }
        let mean_of =
            |algo: Algo| merged.get(&algo).map(|s| s.iter().map(|r| best_raw(&r.log)).sum::<f64>() / s.len() as f64);
        let rw_mean = mean_of(Algo::Rw);
        let exhaustive = merged.get(&Algo::Exhaustive).map(|s| s.iter().map(|r| best_raw(&r.log)).fold(0.0, f64::max));
        for (&algo, seeds) in &merged {
            let bests: Vec<f64> = seeds.iter().map(|r| best_raw(&r.log)).collect();
            let mean = bests.iter().sum::<f64>() / bests.len() as f64;
            let best_of_k = bests.iter().copied().fold(0.0, f64::max);
            let best_strategy = seeds
                .iter()
                .flat_map(|r| r.log.iter())
                .filter(|r| r.valid && r.raw == best_of_k)
                .find_map(|r| workload.space.decode(&r.action).ok())
                .map(|s| s.to_string());
            rows.push(SummaryRow {
                workload: key.to_string(),
                algorithm: algo.name().to_string(),
                seeds: seeds.len(),
                evals: seeds.iter().map(|r| r.log.len()).sum(),
                mean_best_raw: mean,
                best_of_k,
                vs_rw: rw_mean.filter(|&m| m > 0.0).map(|m| mean / m),
                vs_megatron: exhaustive.filter(|&m| m > 0.0).map(|m| best_of_k / m),
                best_strategy,
            });
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

pub fn render_table(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:<11} {:>5} {:>8} {:>14} {:>14} {:>8} {:>11}  best strategy",
        "workload", "algorithm", "seeds", "evals", "mean best raw", "best of k", "vs rw", "vs megatron"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<24} {:<11} {:>5} {:>8} {:>14.4} {:>14.4} {:>8} {:>11}  {}",
            r.workload,
            r.algorithm,
            r.seeds,
            r.evals,
            r.mean_best_raw,
            r.best_of_k,
            opt(r.vs_rw),
            opt(r.vs_megatron),
            r.best_strategy.as_deref().unwrap_or("-")
        );
    }
    out
}

fn write_rows_csv(path: &Path, rows: &[SummaryRow]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| format_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_summary(out: &Path, rows: &[SummaryRow]) -> Result<(), RunError> {
    let json_path = out.join("summary.json");
    let json = serde_json::to_string_pretty(rows).map_err(|e| format_err(&json_path, e))?;
    fs::write(&json_path, json).map_err(io_err(&json_path))?;
    write_rows_csv(&out.join("summary.csv"), rows)
}

#[derive(Debug, Serialize)]
struct CurvePoint<'a> {
    workload: &'a str,
    algorithm: &'a str,
    seed: u64,
    eval: usize,
    best_raw: f64,
}

pub fn write_curves(path: &Path, dirs: &[RunDir]) -> Result<(), RunError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for d in dirs {
        for (algo, seeds) in &d.runs {
            for run in seeds {
                for (eval, best) in best_so_far(&run.log).into_iter().enumerate() {
                    let p = CurvePoint {
                        workload: &d.workload_key,
                        algorithm: algo.name(),
                        seed: run.seed,
                        eval,
                        best_raw: best,
                    };
                    w.serialize(p).map_err(|e| format_err(path, e))?;
                }
            }
        }
    }
    w.flush().map_err(io_err(path))
}

/// Loads run directories and builds the comparison table. With `out`, also
/// writes `report.csv` and `curves.csv` there.
pub fn cmd_report(dirs: &[PathBuf], out: Option<&Path>) -> Result<Vec<SummaryRow>, RunError> {
    if dirs.is_empty() {
        return Err(RunError::Incompatible("report needs at least one run directory".into()));
    }
    let loaded = dirs.iter().map(|d| RunDir::load(d)).collect::<Result<Vec<_>, _>>()?;
    let rows = summarize(&loaded)?;
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(io_err(out))?;
        write_rows_csv(&out.join("report.csv"), &rows)?;
        write_curves(&out.join("curves.csv"), &loaded)?;
    }
    Ok(rows)
}
