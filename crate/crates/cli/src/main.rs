mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand};
use gcgp_core::condense::{condense_prepared, CondenseReport};
use gcgp_core::eval::{
    aggregate, baseline_and_evaluate, evaluate_gp, generalize_eval, sweep, timing_bench, EvalResult,
    GeneralizeTarget,
};
use gcgp_core::grad::{finite_difference_check, FdOptions, FdReport};
use gcgp_core::io::{load_condensed, save_condensed, write_json, write_sweep_csv, write_timing_csv};
use gcgp_core::oracle::kernel_oracle;
use gcgp_core::reference::{self, PublishedRow};
use gcgp_core::synthetic::{gradient_instance, sparse_random_graph};
use gcgp_core::{GcgpError, Graph, KernelKind, PreparedGraph};
use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug)]
enum CliError {
    Validation(String),
    Numerical(String),
    CheckFailed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::CheckFailed(_) => EXIT_CHECK_FAILED,
        }
    }
}

impl From<GcgpError> for CliError {
    fn from(e: GcgpError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<String> for CliError {
    fn from(msg: String) -> Self {
        CliError::Validation(msg)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "gcgp", version, about = "Graph condensation by Gaussian process posterior matching")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Condense a dataset and evaluate the GP posterior on its test split.
    Condense(RunArgs),
    /// Evaluate a saved condensed graph.
    Evaluate(EvaluateArgs),
    /// Accuracy over a beta × k grid.
    Sweep(SweepArgs),
    /// Per-step wall time across condensed sizes.
    Bench(BenchArgs),
    /// Compare reverse-mode gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Compare the arcsine kernel with a Monte-Carlo erf-network estimate.
    KernelOracle(OracleArgs),
}

/// Settings shared by every dataset run. Flags override the config file.
#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (features.csv, edges.csv, labels.csv, split.json).
    #[arg(long)]
    dataset: Option<String>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of condensation seeds, starting at --seed.
    #[arg(long)]
    seeds: Option<usize>,
    /// Also evaluate Random and K-Center selections of the same size.
    #[arg(long)]
    baselines: bool,
    /// Total condensed nodes, split across classes.
    #[arg(long, conflicts_with = "per_class")]
    size: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    /// Propagation hops.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    sigma_w2: Option<f64>,
    /// auto, inverse-dim or a positive number.
    #[arg(long)]
    feature_scale: Option<String>,
    /// arcsine or dot.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long, overrides_with = "no_row_normalize")]
    row_normalize: bool,
    #[arg(long)]
    no_row_normalize: bool,
    #[arg(long, overrides_with = "no_learn_structure")]
    learn_structure: bool,
    #[arg(long)]
    no_learn_structure: bool,
    #[arg(long = "lr", alias = "learning-rate")]
    learning_rate: Option<f64>,
    /// Step size for the edge parameters (defaults to --lr).
    #[arg(long = "structure-lr")]
    structure_learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    tau0: Option<f64>,
    #[arg(long)]
    tau_end: Option<f64>,
    #[arg(long)]
    alpha_init_std: Option<f64>,
    /// adam or sgd.
    #[arg(long)]
    optimizer: Option<String>,
    /// train or all-labeled.
    #[arg(long)]
    loss_rows: Option<String>,
    #[arg(long)]
    batch_rows: Option<usize>,
    /// sample or gaussian.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    freeze_labels: bool,
    #[arg(long)]
    fixed_noise: bool,
    #[arg(long)]
    early_stop_window: Option<usize>,
    #[arg(long)]
    early_stop_tol: Option<f64>,
}

fn pair(yes: bool, no: bool) -> Option<bool> {
    match (yes, no) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

impl RunArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        macro_rules! put {
            ($key:literal, $v:expr) => {
                if let Some(v) = &$v {
                    out.push(($key, v.to_string()));
                }
            };
        }
        put!("dataset", self.dataset);
        put!("out", self.out);
        put!("seed", self.seed);
        put!("seeds", self.seeds);
        put!("baselines", self.baselines.then_some(true));
        put!("size", self.size);
        put!("per_class", self.per_class);
        put!("k", self.k);
        put!("beta", self.beta);
        put!("sigma_w2", self.sigma_w2);
        put!("feature_scale", self.feature_scale);
        put!("kernel", self.kernel);
        put!("row_normalize_features", pair(self.row_normalize, self.no_row_normalize));
        put!("learn_structure", pair(self.learn_structure, self.no_learn_structure));
        put!("learning_rate", self.learning_rate);
        put!("structure_learning_rate", self.structure_learning_rate);
        put!("epochs", self.epochs);
        put!("tau0", self.tau0);
        put!("tau_end", self.tau_end);
        put!("alpha_init_std", self.alpha_init_std);
        put!("optimizer", self.optimizer);
        put!("loss_rows", self.loss_rows);
        put!("batch_rows", self.batch_rows);
        put!("init", self.init);
        put!("freeze_labels", self.freeze_labels.then_some(true));
        put!("fixed_noise", self.fixed_noise.then_some(true));
        put!("early_stop_window", self.early_stop_window);
        put!("early_stop_tol", self.early_stop_tol);
        out
    }

    /// Defaults, then the file, then flags and `extra`.
    fn resolve(&self, extra: &[(&'static str, String)]) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for (key, value) in self.overrides().iter().chain(extra) {
            cfg.set(key, value).map_err(|e| format!("--{}: {e}", key.replace('_', "-")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Condensed graph JSON written by `condense`.
    #[arg(long)]
    condensed: PathBuf,
    /// Dataset directory; defaults to the one recorded in the file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// gp, krr or sgc.
    #[arg(long, default_value = "gp")]
    target: String,
    /// Directory for metrics.json; printed to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated beta values.
    #[arg(long)]
    betas: Option<String>,
    /// Comma-separated hop counts.
    #[arg(long)]
    ks: Option<String>,
    /// Parallel grid cells (capped by GCGP_THREADS).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated condensed sizes.
    #[arg(long)]
    sizes: Option<String>,
    /// Timed steps per size.
    #[arg(long)]
    steps: Option<usize>,
    /// Synthetic graph size when no dataset is given.
    #[arg(long, default_value_t = 5000)]
    synthetic_n: usize,
    #[arg(long, default_value_t = 64)]
    synthetic_d: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 6)]
    m: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long)]
    learn_structure: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "arcsine")]
    kernel: KernelKind,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    rel_tol: f64,
    #[arg(long, default_value_t = 1e-7)]
    abs_floor: f64,
    /// Write the per-coordinate report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, default_value_t = 5)]
    dims: usize,
    #[arg(long, default_value_t = 50)]
    pairs: usize,
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    /// Comma-separated beta values.
    #[arg(long, default_value = "0.1,0.5,1")]
    betas: String,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(long, default_value_t = 3e-3)]
    tolerance: f64,
}

/// Config, seed and resolved feature scale, embedded in every artifact.
fn provenance(cfg: &RunConfig, feature_scale: Option<f64>, seed: u64) -> Value {
    json!({
        "run": cfg,
        "seed": seed,
        "feature_scale_resolved": feature_scale,
    })
}

/// The output directory, with the effective config written into it as a
/// file that `--config` accepts.
fn out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Validation("no output directory (use --out or `out = ...`)".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    let path = out.join("effective.conf");
    std::fs::write(&path, cfg.to_file_string()).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    Ok(out)
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn load_graph(cfg: &RunConfig) -> CliResult<Graph> {
    let dir = cfg.dataset_dir()?;
    let start = Instant::now();
    let graph = Graph::load(dir)?;
    info!(
        "loaded {} ({} nodes, {} features, {} classes) in {:.1}s",
        dir.display(),
        graph.num_nodes(),
        graph.num_features(),
        graph.num_classes(),
        start.elapsed().as_secs_f64()
    );
    Ok(graph)
}

#[derive(Serialize)]
struct Published {
    label: &'static str,
    row: &'static PublishedRow,
}

#[derive(Serialize)]
struct Metrics {
    #[serde(flatten)]
    result: EvalResult,
    dataset: String,
    condensed_nodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    random: Option<EvalResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kcenter: Option<EvalResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    published: Option<Published>,
    config: Value,
}

fn cmd_condense(args: &RunArgs) -> CliResult {
    let cfg = args.resolve(&[])?;
    cfg.dataset_dir()?;
    let out = out_dir(&cfg)?;
    let graph = load_graph(&cfg)?;
    let prep = PreparedGraph::new(&graph, cfg.condense.propagation())?;
    let kcfg = cfg.condense.kernel_config(&prep.propagated);
    info!("feature scale {} resolves to {:.4e}", cfg.condense.feature_scale, kcfg.feature_scale);
    let meta = |seed| provenance(&cfg, Some(kcfg.feature_scale), seed);

    let mut runs = Vec::new();
    let mut reports: Vec<CondenseReport> = Vec::new();
    let mut m = 0;
    for s in 0..cfg.seeds {
        let seed = cfg.condense.seed + s as u64;
        let mut run_cfg = cfg.condense.clone();
        run_cfg.seed = seed;
        let start = Instant::now();
        let (cg, report) = condense_prepared(&prep, &run_cfg)?;
        let condense_ms = start.elapsed().as_secs_f64() * 1e3;
        for w in &report.warnings {
            warn!("{w}");
        }
        let mut result = evaluate_gp(&prep, &cg, run_cfg.kernel, &kcfg)?;
        result.wall_time_condense_ms = condense_ms;
        info!(
            "seed {seed}: {} steps, final loss {:.4e}, test accuracy {:.4}",
            report.steps_run,
            report.loss_history.last().copied().unwrap_or(f64::NAN),
            result.accuracy_mean
        );
        let name = if s == 0 {
            "condensed.json".to_string()
        } else {
            format!("condensed-seed{seed}.json")
        };
        save_condensed(out.join(name), &cg, meta(seed))?;
        m = cg.m();
        runs.push(result);
        reports.push(report);
    }
    let result = aggregate(&runs);

    let (random, kcenter) = if cfg.baselines {
        (
            Some(baseline_and_evaluate(&prep, &cfg.condense, cfg.seeds, false)?),
            Some(baseline_and_evaluate(&prep, &cfg.condense, cfg.seeds, true)?),
        )
    } else {
        (None, None)
    };
    let name = dataset_name(cfg.dataset_dir()?);
    let metrics = Metrics {
        published: reference::lookup(&name, m).map(|row| Published {
            label: reference::LABEL,
            row,
        }),
        result,
        dataset: name,
        condensed_nodes: m,
        random,
        kcenter,
        config: meta(cfg.condense.seed),
    };
    write_json(out.join("metrics.json"), &metrics)?;
    write_json(
        out.join("report.json"),
        &json!({ "runs": reports, "config": meta(cfg.condense.seed) }),
    )?;

    println!(
        "{}: m = {m}, test accuracy {:.4} ± {:.4} over {} seed(s)",
        metrics.dataset,
        metrics.result.accuracy_mean,
        metrics.result.accuracy_std,
        cfg.seeds
    );
    for (label, r) in [("random", &metrics.random), ("k-center", &metrics.kcenter)] {
        if let Some(r) = r {
            println!("{label}: test accuracy {:.4} ± {:.4}", r.accuracy_mean, r.accuracy_std);
        }
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> CliResult {
    let (cg, stored) = load_condensed(&args.condensed)?;
    let mut cfg: RunConfig = serde_json::from_value(stored.get("run").cloned().unwrap_or(Value::Null))
        .map_err(|e| format!("{} carries no usable run config: {e}", args.condensed.display()))?;
    if let Some(d) = &args.dataset {
        cfg.dataset = Some(d.clone());
    }
    let graph = load_graph(&cfg)?;
    let prep = PreparedGraph::new(&graph, cfg.condense.propagation())?;
    let kcfg = cfg.condense.kernel_config(&prep.propagated);
    let result = match args.target.as_str() {
        "gp" => evaluate_gp(&prep, &cg, cfg.condense.kernel, &kcfg)?,
        other => generalize_eval(&prep, &cg, other.parse::<GeneralizeTarget>()?, &kcfg)?,
    };
    let seed = stored.get("seed").and_then(Value::as_u64).unwrap_or(cfg.condense.seed);
    let doc = json!({
        "target": args.target,
        "condensed": args.condensed,
        "result": result,
        "config": provenance(&cfg, Some(kcfg.feature_scale), seed),
    });
    if let Some(out) = &args.out {
        write_json(out.join("metrics.json"), &doc)?;
    }
    println!("{}", serde_json::to_string_pretty(&doc).map_err(GcgpError::from)?);
    Ok(())
}

fn cmd_sweep(args: &SweepArgs, cap: Option<usize>) -> CliResult {
    let mut extra = Vec::new();
    if let Some(b) = &args.betas {
        extra.push(("betas", b.clone()));
    }
    if let Some(k) = &args.ks {
        extra.push(("ks", k.clone()));
    }
    let cfg = args.run.resolve(&extra)?;
    cfg.dataset_dir()?;
    let out = out_dir(&cfg)?;
    let graph = load_graph(&cfg)?;
    let jobs = args
        .jobs
        .unwrap_or_else(rayon::current_num_threads)
        .min(cap.unwrap_or(usize::MAX))
        .max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Validation(format!("cannot start {jobs} workers: {e}")))?;
    info!("{} cells on {jobs} worker(s)", cfg.betas.len() * cfg.ks.len());
    let cells = pool.install(|| sweep(&graph, &cfg.condense, &cfg.betas, &cfg.ks, cfg.seeds))?;
    write_sweep_csv(out.join("sweep.csv"), &cells)?;
    write_json(
        out.join("sweep.json"),
        &json!({ "cells": cells, "config": provenance(&cfg, None, cfg.condense.seed) }),
    )?;
    println!("{:>10} {:>3} {:>9} {:>9}", "beta", "k", "acc_mean", "acc_std");
    for c in &cells {
        println!("{:>10} {:>3} {:>9.4} {:>9.4}", c.beta, c.k, c.acc_mean, c.acc_std);
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> CliResult {
    let mut extra = Vec::new();
    if let Some(s) = &args.sizes {
        extra.push(("sizes", s.clone()));
    }
    if let Some(s) = args.steps {
        extra.push(("bench_steps", s.to_string()));
    }
    let cfg = args.run.resolve(&extra)?;
    if cfg.dataset.is_some() {
        cfg.dataset_dir()?;
    }
    let out = out_dir(&cfg)?;
    let graph = if cfg.dataset.is_some() {
        load_graph(&cfg)?
    } else {
        if args.synthetic_n == 0 || args.synthetic_d == 0 {
            return Err(CliError::Validation("synthetic graph sizes must be positive".into()));
        }
        info!("synthetic graph n = {}, d = {}", args.synthetic_n, args.synthetic_d);
        sparse_random_graph(args.synthetic_n, args.synthetic_d, 7, 4.0, cfg.condense.seed)
    };
    let report = timing_bench(&graph, &cfg.sizes, &cfg.condense, cfg.bench_steps)?;
    write_timing_csv(out.join("timing.csv"), &report)?;
    write_json(
        out.join("timing.json"),
        &json!({ "report": report, "config": provenance(&cfg, None, cfg.condense.seed) }),
    )?;
    println!("n = {}, d = {}", report.n, report.d);
    for r in &report.rows {
        println!("m = {:>5}: {:.2} ms/step", r.m, r.step_ms);
    }
    println!(
        "log-log slope {:.2}, max measured/model ratio {:.2}, consistent with c1 m^3 + c2 m n d: {}",
        report.loglog_slope, report.max_model_ratio, report.consistent
    );
    println!("artifacts in {}", out.display());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult {
    let (obj, cg, noise) = gradient_instance(
        args.n,
        args.m,
        args.d,
        args.classes,
        args.learn_structure,
        args.kernel,
        args.seed,
    )?;
    let opts = FdOptions {
        step: args.step,
        rel_tol: args.rel_tol,
        abs_floor: args.abs_floor,
        ..FdOptions::default()
    };
    let report: FdReport = finite_difference_check(&obj, &cg, noise.as_ref(), &opts)?;
    if let Some(path) = &args.json {
        write_json(path, &report)?;
    }
    let failing = report.entries.iter().filter(|e| !e.ok).count();
    println!(
        "max relative error {:.3e} over {} coordinates (max abs error {:.3e}, {failing} failing)",
        report.max_rel_error,
        report.entries.len(),
        report.max_abs_error
    );
    if report.passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient check failed: {failing} coordinate(s) exceed relative error {:e}",
            args.rel_tol
        )))
    }
}

fn cmd_kernel_oracle(args: &OracleArgs) -> CliResult {
    let betas: Vec<f64> = args
        .betas
        .split(',')
        .map(|s| s.trim().parse().map_err(|e| format!("invalid beta `{s}`: {e}")))
        .collect::<Result<_, _>>()?;
    let start = Instant::now();
    let report = kernel_oracle(args.dims, args.pairs, args.samples, &betas, args.seed)?;
    println!(
        "max |analytic - Monte-Carlo| = {:.3e} over {} pairs × {} betas, {} samples, {:.1}s",
        report.max_abs_deviation,
        report.pairs,
        report.betas.len(),
        report.samples,
        start.elapsed().as_secs_f64()
    );
    if report.max_abs_deviation < args.tolerance {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "deviation {:.3e} is not below {:e}",
            report.max_abs_deviation, args.tolerance
        )))
    }
}

fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var("GCGP_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Validation(format!("GCGP_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(None),
    }
}

fn run(cli: &Cli) -> CliResult {
    let cap = thread_cap()?;
    if let Some(n) = cap {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("cannot start {n} threads: {e}")))?;
    }
    match &cli.command {
        Command::Condense(a) => cmd_condense(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a, cap),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::KernelOracle(a) => cmd_kernel_oracle(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::Validation(msg) | CliError::Numerical(msg) | CliError::CheckFailed(msg)) = &e;
            eprintln!("error: {msg}");
            ExitCode::from(e.code())
        }
    }
}
