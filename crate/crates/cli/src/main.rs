use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use shardsearch::config::{ExperimentConfig, CONFIG_ENV_VAR};
use shardsearch::runner::{cmd_report, cmd_search, render_table, Algo, SearchArgs};
use shardsearch::sim::plan_model;
use shardsearch::{ShardDim, Strategy, StrategyError};

#[derive(Parser)]
#[command(name = "shardsearch", version, about = "Search parallelism degrees and shard dims for MoE decode")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(long, env = CONFIG_ENV_VAR)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one strategy.
    Simulate(SimulateArgs),
    /// Run seeded searches into a run directory.
    Search(SearchCmd),
    /// Compare run directories.
    Report(ReportCmd),
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    tp: u64,
    #[arg(long)]
    ep: u64,
    #[arg(long)]
    pp: u64,
    #[arg(long)]
    batch: u64,
    /// Pin every searched op to its Megatron shard dim.
    #[arg(long, conflicts_with = "dims")]
    megatron: bool,
    /// One symbol per searched op: '-' unsharded, '0' or '1'.
    #[arg(long, required_unless_present = "megatron")]
    dims: Option<String>,
    /// Print the per-op collective trace.
    #[arg(long)]
    explain: bool,
    /// Print the result as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SearchCmd {
    #[command(flatten)]
    config: ConfigArg,
    /// Comma-separated: ppo, sa, rw, exhaustive.
    #[arg(long, value_delimiter = ',', default_value = "ppo")]
    algo: Vec<Algo>,
    /// Evaluations per run; defaults to the config's budget.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportCmd {
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Directory for report.csv and curves.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A strategy rejected before or by the simulator.
#[derive(Debug)]
struct InvalidStrategy(String);

impl std::fmt::Display for InvalidStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvalidStrategy {}

fn load(path: &Path) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?)
}

fn parse_dims(s: &str) -> Result<Vec<ShardDim>, InvalidStrategy> {
    s.chars()
        .map(|c| match c {
            '-' => Ok(ShardDim::Unsharded),
            '0' => Ok(ShardDim::Dim0),
            '1' => Ok(ShardDim::Dim1),
            _ => Err(InvalidStrategy(format!("--dims: unexpected symbol {c:?} (use '-', '0' or '1')"))),
        })
        .collect()
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let cfg = load(&args.config.config)?;
    let workload = cfg.build_workload().map_err(anyhow::Error::msg)?;
    let op_dims = match &args.dims {
        Some(d) => parse_dims(d)?,
        None => workload.megatron_search_dims(),
    };
    let strategy = Strategy { tp: args.tp, ep: args.ep, pp: args.pp, batch: args.batch, op_dims };
    if let Err(e) = workload.space.encode(&strategy) {
        let msg = match e {
            StrategyError::WrongLength { expected, got } => {
                let names: Vec<&str> = workload.search_ops.iter().map(|o| o.name()).collect();
                format!("--dims needs {expected} symbols, got {got}; searched ops: {}", names.join(", "))
            }
            e => e.to_string(),
        };
        return Err(InvalidStrategy(msg).into());
    }
    let result = workload.simulate(&strategy);

    if args.json {
        println!("{}", serde_json::to_string_pretty(&result)?);
    } else {
        let b = result.time_breakdown;
        println!("strategy      {strategy}");
        println!("world size    {}", strategy.world_size());
        println!("valid         {}", result.valid);
        if !result.valid {
            println!("reason        {}", result.invalid_reason.as_str());
        }
        if let Some(e) = &result.layout_error {
            println!("layout error  {e}");
        }
        println!("throughput    {:.6} tokens/s/chip", result.throughput);
        println!("tpot          {:.6e} s (slo {:.3e} s)", result.tpot, workload.slo_tpot);
        println!(
            "memory        {:.4} GB per device (capacity {:.4} GB)",
            result.mem_per_device / 1e9,
            workload.hw.hbm_capacity / 1e9
        );
        println!("compute       {:.6e} s", b.compute_s);
        println!("comm          {:.6e} s", b.comm_s);
        println!("pipeline      {:.6e} s", b.pipeline_s);
    }
    if args.explain {
        let full = workload.expand(&strategy);
        match plan_model(&workload.request(&full)) {
            Ok(plans) => {
                for (title, plan) in ["prologue", "layer", "epilogue"].iter().zip(&plans) {
                    println!("\n# {title}");
                    print!("{}", plan.trace());
                }
            }
            Err(e) => println!("\nno plan: {e}"),
        }
    }
    if !result.valid {
        return Err(InvalidStrategy(format!("strategy is invalid: {}", result.invalid_reason.as_str())).into());
    }
    Ok(())
}

fn search(args: SearchCmd) -> Result<()> {
    let cfg = load(&args.config.config)?;
    if args.algo.is_empty() {
        bail!("--algo needs at least one algorithm");
    }
    let outcome = cmd_search(
        &cfg,
        &SearchArgs { algos: args.algo, budget: args.budget, seeds: args.seeds, out: args.out.clone() },
    )?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    for r in &outcome.reports {
        eprintln!(
            "{} seed {}: {} evals, best raw {:.4}, {:.1}s",
            r.algorithm, r.seed, r.evals, r.best_raw, r.wall_clock_s
        );
    }
    print!("{}", render_table(&outcome.summary));
    println!("run directory: {}", args.out.display());
    Ok(())
}

fn report(args: ReportCmd) -> Result<()> {
    let rows = cmd_report(&args.dirs, args.out.as_deref()).context("report failed")?;
    print!("{}", render_table(&rows));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Search(a) => search(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<InvalidStrategy>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
