//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines stream as each
//! criterion finishes. Set `SHARDSEARCH_ACCEPTANCE_STRICT=1` to exit non-zero
//! when any criterion fails, and `SHARDSEARCH_ACCEPTANCE_ONLY=1,5` to run a
//! subset.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shardsearch::baselines::{megatron_exhaustive, random_walk, simulated_annealing};
use shardsearch::config::ExperimentConfig;
use shardsearch::layout::{plan_layer, LayerPlan, PlanStep};
use shardsearch::policy::{NetConfig, PolicyParams};
use shardsearch::ppo::{loss_and_grad, run_search, ChunkOutcome, PpoConfig, PpoSearch, Transition};
use shardsearch::runner::{cmd_search, read_eval_log, replay_mismatches, Algo, SearchArgs};
use shardsearch::search::SearchReport;
use shardsearch::sim::collective_time;
use shardsearch::strategy::{canonical_ops, megatron_fine_dims};
use shardsearch::{
    CollectiveKind, CollectiveOp, FusedOp, InvalidReason, RewardConfig, SearchEnv, ShardDim, Strategy, Workload,
};

const SEEDS: u64 = 10;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(name)).expect("shipped config loads")
}

fn run_seeds(cfg: &ExperimentConfig, algo: Algo) -> (Vec<SearchReport>, f64) {
    let workload = Arc::new(cfg.build_workload().unwrap());
    let start = Instant::now();
    let reports = (0..SEEDS)
        .map(|seed| {
            let mut env = SearchEnv::new(Arc::clone(&workload), cfg.reward_config(), cfg.workload.budget);
            match algo {
                Algo::Ppo => run_search(&mut env, &cfg.ppo, seed),
                Algo::Sa => simulated_annealing(&mut env, &cfg.sa, seed),
                Algo::Rw => random_walk(&mut env, seed),
                Algo::Exhaustive => unreachable!(),
            }
            .unwrap()
        })
        .collect();
    (reports, start.elapsed().as_secs_f64())
}

fn mean_best(reports: &[SearchReport]) -> f64 {
    reports.iter().map(|r| r.best_raw).sum::<f64>() / reports.len() as f64
}

fn exhaustive(cfg: &ExperimentConfig) -> SearchReport {
    let workload = Arc::new(cfg.build_workload().unwrap());
    let grid: usize = workload.space.head_sizes()[..4].iter().product();
    let mut env = SearchEnv::new(workload, cfg.reward_config(), grid);
    megatron_exhaustive(&mut env).unwrap()
}

// ---------------------------------------------------------------- 1

const TINY: &str = r#"
[model]
name = "tiny-moe"
num_layers = 8
hidden_dim = 1024
ffn_dim = 512
num_heads = 16
head_dim = 64
num_kv_heads = 4
num_experts = 16
experts_per_token = 2
vocab_size = 8192
dtype_bytes = 2
has_shared_expert = false

[hardware]
name = "tiny-accel"
peak_flops = 50e12
hbm_bandwidth = 400e9
hbm_capacity = 160e6
intra_node_bw = 100e9
inter_node_bw = 12.5e9
node_size = 4
device_budget = 16
per_collective_latency = 5e-6
kernel_overhead = 5e-6

[workload]
context_len = 1024
slo_tpot = 0.004
workspace_bytes = 8e6
budget = 1000
search_ops = ["qkv_proj", "attn_out_proj", "expert_ffn1", "expert_ffn2"]
tp_domain = [1, 2, 4]
ep_domain = [1, 2, 4]
pp_domain = [1, 2, 4]
batch_domain = [1, 4, 16]

[reward]
scale = 1000.0
"#;

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::parse(TINY, Path::new("."), Path::new("tiny.toml")).unwrap()
}

/// Ground truth by direct enumeration of every (tp, ep, pp, batch, dims)
/// tuple, straight through the simulator.
fn oracle_optimum(w: &Workload) -> (f64, Strategy, usize) {
    let dims = [ShardDim::Unsharded, ShardDim::Dim0, ShardDim::Dim1];
    let l = w.search_ops.len();
    let mut best = (0.0, None, 0);
    for &tp in &w.space.tp_domain {
        for &ep in &w.space.ep_domain {
            for &pp in &w.space.pp_domain {
                for &batch in &w.space.batch_domain {
                    for code in 0..3usize.pow(l as u32) {
                        let op_dims: Vec<ShardDim> = (0..l).map(|i| dims[(code / 3usize.pow(i as u32)) % 3]).collect();
                        let s = Strategy { tp, ep, pp, batch, op_dims };
                        let r = w.simulate(&s);
                        best.2 += 1;
                        if r.valid && r.throughput > best.0 {
                            best = (r.throughput, Some(s), best.2);
                        }
                    }
                }
            }
        }
    }
    (best.0, best.1.expect("tiny instance has a valid strategy"), best.2)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let cfg = tiny_config();
    let w = cfg.build_workload().unwrap();
    let (opt, opt_s, n) = oracle_optimum(&w);
    let (reports, _) = run_seeds(&cfg, Algo::Ppo);
    let hits = reports.iter().filter(|r| r.best_raw >= 0.95 * opt).count();
    let secs = start.elapsed().as_secs_f64();
    let ratios: Vec<String> = reports.iter().map(|r| format!("{:.3}", r.best_raw / opt)).collect();
    verdict(
        hits >= 8 && secs < 120.0,
        format!(
            "oracle {opt:.3} over {n} configs ({opt_s}); {hits}/10 seeds >= 95% [{}]; {secs:.1}s (limit 120s)",
            ratios.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 2 and 3

struct Table1 {
    ppo: Vec<SearchReport>,
    detail: String,
    pass: bool,
}

fn criterion_2(cfg: &ExperimentConfig) -> Table1 {
    let (ppo, t_ppo) = run_seeds(cfg, Algo::Ppo);
    let (sa, t_sa) = run_seeds(cfg, Algo::Sa);
    let (rw, t_rw) = run_seeds(cfg, Algo::Rw);
    let (p, s, r) = (mean_best(&ppo), mean_best(&sa), mean_best(&rw));
    let ratio = p / r;
    let fast = [t_ppo, t_sa, t_rw].iter().all(|&t| t < 600.0);
    let budget_ok = ppo.iter().chain(&sa).chain(&rw).all(|x| x.evals == cfg.workload.budget);
    let pass = p > s && p > r && ratio >= 1.5 && fast && budget_ok;
    let detail = format!(
        "mean best raw ppo {p:.3} sa {s:.3} rw {r:.3}; ppo>sa {} ppo>rw {} ppo/rw {ratio:.3} (need >= 1.5); \
         wall ppo {t_ppo:.0}s sa {t_sa:.1}s rw {t_rw:.1}s (limit 600s each)",
        p > s,
        p > r
    );
    Table1 { ppo, detail, pass }
}

fn criterion_3_on(cfg: &ExperimentConfig, ppo: &[SearchReport]) -> (bool, String) {
    let w = cfg.build_workload().unwrap();
    let ex = exhaustive(cfg);
    let top = ppo.iter().map(|r| r.best_raw).fold(0.0, f64::max);
    let megatron = megatron_fine_dims(&w.ops);
    let differs_from_megatron =
        |r: &&&SearchReport| r.best_by_raw.as_ref().is_some_and(|s| w.expand(&s.strategy).op_dims != megatron);
    // seeds tied at the best raw are all winners; prefer a non-Megatron plan
    let tied: Vec<&SearchReport> = ppo.iter().filter(|r| r.best_raw == top).collect();
    let best = tied.iter().find(differs_from_megatron).copied().unwrap_or(tied[0]);
    let Some(sel) = &best.best_by_raw else {
        return (false, format!("{}: no valid ppo strategy", w.key()));
    };
    // audit the winning strategy independently of the search log
    let audit = w.simulate(&sel.strategy);
    let differs = w.expand(&sel.strategy).op_dims != megatron;
    let ratio = best.best_raw / ex.best_raw;
    let ok = audit.valid && audit.throughput == best.best_raw && ratio >= 1.0 && differs;
    (
        ok,
        format!(
            "{}: best-of-10 ppo {:.3} ({}) vs megatron-exhaustive {:.3} ({}), ratio {ratio:.4}, dims differ {differs}",
            w.key(),
            best.best_raw,
            sel.strategy,
            ex.best_raw,
            ex.selection.strategy
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Verdict {
    let cfg = shipped("moe-1.2t-16k.toml");
    let m = &cfg.model;
    let ops = canonical_ops(m);
    let mega = megatron_fine_dims(&ops);
    let mut alt = mega.clone();
    alt[FusedOp::ExpertFfn1.canonical_index()] = ShardDim::Dim1;
    alt[FusedOp::ExpertFfn2.canonical_index()] = ShardDim::Dim1;
    let (tp, ep, batch) = (4, 1, 16);
    let node = cfg.hardware.node_size;
    let p_alt = plan_layer(m, &ops, &alt, tp, ep, batch, node).unwrap();
    let p_mega = plan_layer(m, &ops, &mega, tp, ep, batch, node).unwrap();

    fn mlp(plan: &LayerPlan) -> &[PlanStep] {
        plan.span("router_gate", "layer_exit")
    }
    fn count(steps: &[PlanStep], kind: CollectiveKind) -> usize {
        steps.iter().flat_map(|s| &s.collectives).filter(|c| c.kind == kind && !c.is_noop()).count()
    }
    let between = p_alt
        .step("expert_ffn2")
        .map(|s| s.collectives.iter().any(|c| c.kind == CollectiveKind::AllGather && !c.is_noop()))
        .unwrap_or(false);
    let alt_ar = count(mlp(&p_alt), CollectiveKind::AllReduce);
    let mega_ar = count(mlp(&p_mega), CollectiveKind::AllReduce);
    verdict(
        between && alt_ar == 0 && mega_ar == 1,
        format!("ffn2-on-hidden plan: all-gather before expert_ffn2 {between}, mlp all-reduces {alt_ar}; megatron mlp all-reduces {mega_ar}"),
    )
}

// ---------------------------------------------------------------- 5

fn fd_check() -> (bool, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = NetConfig { d_model: 8, n_heads: 2, ff_dim: 8, history: 3 };
    let masks = vec![vec![true; 3], vec![true; 4], vec![true, false, true], vec![true, true, true]];
    let mut p = PolicyParams::init(net, masks, &mut rng);
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
    }
    let batch: Vec<Transition> = [0.05, -0.1]
        .iter()
        .map(|&off| {
            let obs = ndarray::Array2::from_shape_simple_fn((3, 4), || rng.random::<f64>());
            let out = p.forward(&obs).unwrap();
            let action: Vec<usize> =
                out.dists.iter().map(|d| (0..d.probs.len()).filter(|&j| d.probs[j] > 0.0).last().unwrap()).collect();
            let lp: f64 = out.dists.iter().zip(&action).map(|(d, &a)| d.log_probs[a]).sum();
            Transition { obs, action, logprob: lp + off, value: 0.3, reward: rng.random_range(-2.0..2.0) }
        })
        .collect();
    let cfg = PpoConfig { net, ..PpoConfig::default() };
    let (_, grad) = loss_and_grad(&p, &batch, &cfg).unwrap();
    let analytic: Vec<Vec<f64>> = grad.tensors().iter().map(|(_, _, v)| v.to_vec()).collect();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for (ti, g) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let orig = p.tensors_mut()[ti][i];
            p.tensors_mut()[ti][i] = orig + h;
            let up = loss_and_grad(&p, &batch, &cfg).unwrap().0.total;
            p.tensors_mut()[ti][i] = orig - h;
            let down = loss_and_grad(&p, &batch, &cfg).unwrap().0.total;
            p.tensors_mut()[ti][i] = orig;
            let fd = (up - down) / (2.0 * h);
            let scale = fd.abs().max(g[i].abs());
            if scale > 1e-7 {
                worst = worst.max((fd - g[i]).abs() / scale);
            }
        }
    }
    (worst <= 1e-4, worst)
}

fn collective_check() -> (bool, f64) {
    let hw = shipped("moe-1.2t-16k.toml").hardware;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let kinds = [
        CollectiveKind::AllReduce,
        CollectiveKind::AllGather,
        CollectiveKind::ReduceScatter,
        CollectiveKind::AllToAll,
        CollectiveKind::PointToPoint,
    ];
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let kind = kinds[rng.random_range(0..kinds.len())];
        let n: u64 = rng.random_range(2..=256);
        let bytes: f64 = rng.random_range(1.0..1e9);
        let intra = n <= hw.node_size;
        let c = CollectiveOp {
            kind,
            payload_bytes: bytes,
            group_size: n,
            interconnect: shardsearch::layout::Interconnect::for_span(n, hw.node_size),
            group: shardsearch::layout::CommGroup::Tp,
        };
        let bw = if intra { hw.intra_node_bw } else { hw.inter_node_bw };
        let frac = (n - 1) as f64 / n as f64;
        let transfer = match kind {
            CollectiveKind::AllReduce => 2.0 * frac * bytes / bw,
            CollectiveKind::AllGather | CollectiveKind::ReduceScatter | CollectiveKind::AllToAll => frac * bytes / bw,
            CollectiveKind::PointToPoint => bytes / bw,
            _ => unreachable!(),
        };
        let mut hops = 0;
        while (1u64 << hops) < n {
            hops += 1;
        }
        let expected = transfer + hw.per_collective_latency * hops as f64;
        let got = collective_time(&c, &hw);
        worst = worst.max((got - expected).abs() / expected);
    }
    (worst <= 1e-12, worst)
}

fn breakdown_check() -> (bool, usize) {
    let w = shipped("moe-1.2t-16k.toml").build_workload().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(56);
    let mut bad = 0;
    for _ in 0..2000 {
        let s = w.space.decode(&w.sample_uniform(&mut rng)).unwrap();
        let r = w.simulate(&s);
        if r.invalid_reason == InvalidReason::LayoutError || r.invalid_reason == InvalidReason::OverDeviceBudget {
            continue;
        }
        let b = r.time_breakdown;
        if b.compute_s + b.comm_s + b.pipeline_s != r.tpot {
            bad += 1;
        }
    }
    (bad == 0, bad)
}

fn bijection_check() -> (bool, usize) {
    let space = shipped("moe-1.2t-16k.toml").action_space().unwrap();
    let sizes = space.head_sizes();
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let dims = [ShardDim::Unsharded, ShardDim::Dim0, ShardDim::Dim1];
    let mut bad = 0;
    for _ in 0..100_000 {
        let s = Strategy {
            tp: space.tp_domain[rng.random_range(0..space.tp_domain.len())],
            ep: space.ep_domain[rng.random_range(0..space.ep_domain.len())],
            pp: space.pp_domain[rng.random_range(0..space.pp_domain.len())],
            batch: space.batch_domain[rng.random_range(0..space.batch_domain.len())],
            op_dims: (0..space.num_ops).map(|_| dims[rng.random_range(0..3)]).collect(),
        };
        let a = space.encode(&s).unwrap();
        let a_ok = a.iter().zip(&sizes).all(|(&i, &n)| i < n);
        if !a_ok || space.decode(&a).unwrap() != s {
            bad += 1;
        }
    }
    (bad == 0, bad)
}

fn criterion_5() -> Verdict {
    let (fd_ok, fd_err) = fd_check();
    let (coll_ok, coll_err) = collective_check();
    let (sum_ok, sum_bad) = breakdown_check();
    let (bij_ok, bij_bad) = bijection_check();
    verdict(
        fd_ok && coll_ok && sum_ok && bij_ok,
        format!(
            "(a) fd max rel err {fd_err:.2e} (<= 1e-4); (b) collectives max rel err {coll_err:.2e} over 20 tuples (<= 1e-12); \
             (c) breakdown != tpot in {sum_bad}/2000; (d) bijection failures {bij_bad}/100000"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Verdict {
    let cfg = tiny_config();
    let w = Arc::new(cfg.build_workload().unwrap());
    let small = PpoConfig { net: NetConfig { d_model: 16, n_heads: 2, ff_dim: 16, history: 4 }, ..cfg.ppo };
    let mut notes = Vec::new();
    let env = |budget| SearchEnv::new(Arc::clone(&w), cfg.reward_config(), budget);

    // early exit fires iff every unmasked head is confident
    let mut e = env(50);
    let mut s = PpoSearch::new(&mut e, small, 1);
    for h in &mut s.params_mut().heads {
        h.b[0] = 60.0;
    }
    let forced_exit = s.run_chunk(40).unwrap() == ChunkOutcome::EarlyExit { evals: 2 };
    let mut e = env(50);
    let mut s = PpoSearch::new(&mut e, small, 1);
    for h in &mut s.params_mut().heads {
        h.b[0] = 60.0;
    }
    s.params_mut().heads[0].b[1] = 60.0;
    let blocked = s.run_chunk(10).unwrap() == ChunkOutcome::Exhausted { evals: 10 };
    let mut e = env(50);
    let mut s = PpoSearch::new(&mut e, small, 1);
    let uniform_runs = s.run_chunk(10).unwrap() == ChunkOutcome::Exhausted { evals: 10 };
    notes.push(format!("forced exit {forced_exit}, one tied head blocks {blocked}, uniform runs on {uniform_runs}"));

    // restart keeps b and elites, redraws params
    let mut e = env(200);
    let mut s = PpoSearch::new(&mut e, small, 2);
    s.run_chunk(60).unwrap();
    let (b, elites, params) = (s.env().best_raw(), s.elites().clone(), s.params().clone());
    s.restart();
    let restart_ok = s.env().best_raw() == b && s.elites() == &elites && s.params() != &params && !elites.is_empty();
    notes.push(format!("restart keeps b/elites and redraws params {restart_ok}"));

    // budget accounting, monotone b and replay through the on-disk logs
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let budget = 173;
    let mut c = cfg.clone();
    c.ppo = small;
    let outcome = cmd_search(
        &c,
        &SearchArgs { algos: vec![Algo::Ppo, Algo::Sa, Algo::Rw], budget: Some(budget), seeds: 2, out: out.clone() },
    )
    .unwrap();
    let mut exact = outcome.reports.iter().all(|r| r.evals == budget);
    let mut monotone = true;
    let mut mismatches = 0;
    for algo in ["ppo", "sa", "rw"] {
        for seed in 0..2 {
            let log = read_eval_log(&out.join(format!("{algo}/seed-{seed}/evals.jsonl"))).unwrap();
            exact &= log.len() == budget;
            monotone &= log.windows(2).all(|x| x[0].best_raw <= x[1].best_raw);
            mismatches += replay_mismatches(&w, &log).len();
        }
    }
    notes.push(format!("evals == budget {exact}, b non-decreasing {monotone}, replay mismatches {mismatches}"));
    verdict(
        forced_exit && blocked && uniform_runs && restart_ok && exact && monotone && mismatches == 0,
        notes.join("; "),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Verdict {
    let r = RewardConfig { alpha: 1.0, beta: 1.0, invalid_penalty: -100.0, scale: 100.0 };
    let mut notes = Vec::new();
    let mut ok = r.reward(10.0, 8.0) == 12.0 && r.reward(5.0, 8.0) == 2.0;
    notes.push(format!("r(10|b=8) {} r(5|b=8) {}", r.reward(10.0, 8.0), r.reward(5.0, 8.0)));

    let w = Arc::new(tiny_config().build_workload().unwrap());
    let mut env = SearchEnv::new(Arc::clone(&w), r, 8);
    let valid = {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        (0..10_000).map(|_| w.sample_uniform(&mut rng)).find(|a| w.simulate(&w.space.decode(a).unwrap()).valid)
    }
    .unwrap();
    let invalid = {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        (0..10_000).map(|_| w.sample_uniform(&mut rng)).find(|a| !w.simulate(&w.space.decode(a).unwrap()).valid)
    }
    .unwrap();
    let first = env.step(&valid).unwrap();
    let b1 = env.best_raw();
    ok &= first.valid && first.reward == first.raw * 2.0 && b1 == first.raw;
    let bad = env.step(&invalid).unwrap();
    ok &= !bad.valid && bad.reward == -100.0 && env.best_raw() == b1 && env.evals_used() == 2;
    let again = env.step(&valid).unwrap();
    ok &= again.reward == again.raw && env.evals_used() == 3;
    notes.push(format!(
        "first valid r=2raw {}, invalid r={} with b kept and budget spent {}, repeat r=raw {}",
        first.reward == first.raw * 2.0,
        bad.reward,
        env.evals_used() == 3,
        again.reward == again.raw
    ));
    verdict(ok, notes.join("; "))
}

// ----------------------------------------------------------------

fn report(results: &mut Vec<(usize, &'static str, bool)>, id: usize, name: &'static str, v: Verdict) {
    println!("{} [{id}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    let _ = std::io::stdout().flush();
    results.push((id, name, v.pass));
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("SHARDSEARCH_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut results = Vec::new();
    if want(7) {
        report(&mut results, 7, "reward unit cases", criterion_7());
    }
    if want(5) {
        report(&mut results, 5, "numerical suite", criterion_5());
    }
    if want(4) {
        report(&mut results, 4, "ffn2-on-hidden plan structure", criterion_4());
    }
    if want(6) {
        report(&mut results, 6, "protocol suite", criterion_6());
    }
    if want(1) {
        report(&mut results, 1, "tiny-instance oracle optimality", criterion_1());
    }
    if want(2) || want(3) {
        let big = shipped("moe-1.2t-16k.toml");
        let t1 = criterion_2(&big);
        if want(2) {
            report(&mut results, 2, "1.2T@16k ppo vs sa vs rw", verdict(t1.pass, t1.detail.clone()));
        }
        if want(3) {
            let (mut ok3, mut detail3) = criterion_3_on(&big, &t1.ppo);
            if !ok3 {
                let other = shipped("moe-1.6t-16k.toml");
                let (ppo, _) = run_seeds(&other, Algo::Ppo);
                let (ok, d) = criterion_3_on(&other, &ppo);
                ok3 = ok;
                detail3 = format!("{detail3} | {d}");
            }
            report(&mut results, 3, "best-of-10 ppo vs megatron exhaustive", verdict(ok3, detail3));
        }
    }

    let passed = results.iter().filter(|r| r.2).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    let strict = std::env::var("SHARDSEARCH_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed != results.len() {
        std::process::exit(1);
    }
}
