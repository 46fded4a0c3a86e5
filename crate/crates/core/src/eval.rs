//! Accuracy evaluation, selection baselines, generalization to other
//! predictors, kernel ablation, hyperparameter sweeps and timing runs.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condense::{
    allocate_per_class, class_allocation, condense_prepared, initialize, objective, run_loop,
    CondenseConfig, CondensedGraph, Optimizer, OptimizerKind, PreparedGraph, Provenance,
};
use crate::covariance::{kernel_matrix, KernelConfig, KernelKind};
use crate::error::{GcgpError, Result};
use crate::gp::{posterior_mean, predict_labels};
use crate::graph::Graph;
use crate::relax::RelaxedStructure;

/// Accuracy summary over one or more runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    /// Accuracy of every run that went into the mean.
    pub accuracies: Vec<f64>,
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`, summed over runs.
    pub confusion: Vec<Vec<usize>>,
    pub wall_time_condense_ms: f64,
    pub wall_time_eval_ms: f64,
    pub num_test: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn score(pred: &[usize], truth: &[usize], classes: usize) -> EvalResult {
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p.min(classes - 1)] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let acc = if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 };
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                row[c] as f64 / total as f64
            }
        })
        .collect();
    EvalResult {
        accuracy_mean: acc,
        accuracy_std: 0.0,
        accuracies: vec![acc],
        per_class_accuracy,
        confusion,
        num_test: truth.len(),
        ..Default::default()
    }
}

/// Mean and standard deviation across runs; confusion counts are summed.
pub fn aggregate(runs: &[EvalResult]) -> EvalResult {
    let Some(first) = runs.first() else {
        return EvalResult::default();
    };
    let accuracies: Vec<f64> = runs.iter().flat_map(|r| r.accuracies.iter().copied()).collect();
    let (accuracy_mean, accuracy_std) = mean_std(&accuracies);
    let classes = first.confusion.len();
    let mut confusion = vec![vec![0usize; classes]; classes];
    for r in runs {
        for (dst, src) in confusion.iter_mut().zip(&r.confusion) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let per_class_accuracy = (0..classes)
        .map(|c| mean_std(&runs.iter().map(|r| r.per_class_accuracy[c]).collect::<Vec<_>>()).0)
        .collect();
    EvalResult {
        accuracy_mean,
        accuracy_std,
        accuracies,
        per_class_accuracy,
        confusion,
        wall_time_condense_ms: runs.iter().map(|r| r.wall_time_condense_ms).sum(),
        wall_time_eval_ms: runs.iter().map(|r| r.wall_time_eval_ms).sum(),
        num_test: first.num_test,
    }
}

fn test_rows(graph: &Graph) -> Result<&[usize]> {
    let test = &graph.splits().test;
    if test.is_empty() {
        return Err(GcgpError::validation("dataset has no test split"));
    }
    Ok(test)
}

/// GP posterior accuracy on the test split, conditioned on the condensed
/// graph. Test rows use features propagated over the full original graph.
pub fn evaluate_gp(
    prep: &PreparedGraph<'_>,
    cg: &CondensedGraph,
    kind: KernelKind,
    cfg: &KernelConfig,
) -> Result<EvalResult> {
    let start = Instant::now();
    let graph = prep.graph;
    let test = test_rows(graph)?;
    let target = prep.propagated.select_rows(test);
    let cond = cg.propagated_features(cfg.k)?;
    let k_cross = kernel_matrix(kind, &target, &cond, cfg)?;
    let k_ss = kernel_matrix(kind, &cond, &cond, cfg)?;
    let (f_bar, _) = posterior_mean(&k_cross, &k_ss, &cg.ys, cfg.beta)?;
    let truth: Vec<usize> = test.iter().map(|&i| graph.labels()[i]).collect();
    let mut out = score(&predict_labels(&f_bar), &truth, graph.num_classes());
    out.wall_time_eval_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}

fn baseline_graph(
    prep: &PreparedGraph<'_>,
    nodes: Vec<usize>,
    method: &str,
    seed: u64,
) -> CondensedGraph {
    let graph = prep.graph;
    let m = nodes.len();
    CondensedGraph {
        xs: prep.propagated.select_rows(&nodes),
        ys: graph.one_hot(&nodes),
        structure: RelaxedStructure::disabled(m, seed),
        provenance: Provenance {
            method: method.into(),
            seed,
            induced_adjacency: Some(graph.adjacency().induced(&nodes)),
            source_nodes: nodes,
            warnings: Vec::new(),
        },
    }
}

fn baseline_allocation(graph: &Graph, size: usize) -> Result<Vec<usize>> {
    if size == 0 {
        return Err(GcgpError::validation("baseline size must be positive"));
    }
    let counts: Vec<usize> = graph.train_by_class().iter().map(Vec::len).collect();
    let total: usize = counts.iter().sum();
    if size > total {
        return Err(GcgpError::validation(format!(
            "baseline size {size} exceeds the {total} training nodes"
        )));
    }
    Ok(allocate_per_class(&counts, size))
}

/// Class-stratified uniform sample of training nodes, features taken after
/// full-graph propagation.
pub fn random_baseline(prep: &PreparedGraph<'_>, size: usize, seed: u64) -> Result<CondensedGraph> {
    let alloc = baseline_allocation(prep.graph, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nodes, _) = crate::condense::stratified_sample(prep.graph, &alloc, &mut rng)?;
    Ok(baseline_graph(prep, nodes, "random", seed))
}

/// Greedy farthest-point traversal from `first`. Returns row indices of
/// `points` in selection order.
pub fn farthest_point_traversal(points: &DMatrix<f64>, first: usize, count: usize) -> Vec<usize> {
    let n = points.nrows();
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let dist = |a: usize, b: usize| (points.row(a) - points.row(b)).norm_squared();
    let mut chosen = vec![first];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist(i, first)).collect();
    while chosen.len() < count {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist(i, best));
        }
    }
    chosen
}

/// K-Center selection per class on propagated features, each class started
/// from a random training node.
pub fn kcenter_baseline(prep: &PreparedGraph<'_>, size: usize, seed: u64) -> Result<CondensedGraph> {
    use rand::Rng;
    let alloc = baseline_allocation(prep.graph, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = Vec::with_capacity(size);
    for (pool, &want) in prep.graph.train_by_class().iter().zip(&alloc) {
        if want == 0 || pool.is_empty() {
            continue;
        }
        let pts = prep.propagated.select_rows(pool);
        let first = rng.random_range(0..pool.len());
        nodes.extend(farthest_point_traversal(&pts, first, want).into_iter().map(|i| pool[i]));
    }
    Ok(baseline_graph(prep, nodes, "kcenter", seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneralizeTarget {
    Krr,
    Sgc,
}

impl std::str::FromStr for GeneralizeTarget {
    type Err = GcgpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "krr" => Ok(GeneralizeTarget::Krr),
            "sgc" => Ok(GeneralizeTarget::Sgc),
            other => Err(GcgpError::validation(format!(
                "unsupported generalization target `{other}` (expected krr or sgc)"
            ))),
        }
    }
}

/// Multinomial logistic regression with bias, fitted by full-batch Adam.
fn fit_logistic(x: &DMatrix<f64>, labels: &[usize], classes: usize, steps: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (m, d) = x.shape();
    // standardize by the largest row norm so one step size suits any scale
    let scale = (0..m).map(|i| x.row(i).norm()).fold(0.0, f64::max).max(1e-12);
    let xs = x / scale;
    let mut w = DMatrix::zeros(d, classes);
    let mut b = DMatrix::zeros(1, classes);
    let mut opt = Optimizer::new(OptimizerKind::adam(), 0.05);
    for _ in 0..steps {
        let mut logits = &xs * &w;
        for mut row in logits.row_iter_mut() {
            row += &b;
        }
        let mut g = DMatrix::zeros(m, classes);
        for i in 0..m {
            let row = logits.row(i);
            let mx = row.max();
            let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..classes {
                g[(i, c)] = (exps[c] / z - f64::from(u8::from(labels[i] == c))) / m as f64;
            }
        }
        let gw = xs.transpose() * &g + &w * 1e-4;
        let gb = DMatrix::from_fn(1, classes, |_, c| g.column(c).sum());
        opt.step(&mut [&mut w, &mut b], &[&gw, &gb]);
    }
    (w / scale, b)
}

/// Accuracy of another predictor fitted on the condensed graph.
pub fn generalize_eval(
    prep: &PreparedGraph<'_>,
    cg: &CondensedGraph,
    target: GeneralizeTarget,
    cfg: &KernelConfig,
) -> Result<EvalResult> {
    let start = Instant::now();
    let graph = prep.graph;
    let test = test_rows(graph)?;
    let truth: Vec<usize> = test.iter().map(|&i| graph.labels()[i]).collect();
    let test_x = prep.propagated.select_rows(test);
    let cond = cg.propagated_features(cfg.k)?;
    let pred = match target {
        GeneralizeTarget::Krr => {
            let k_cross = kernel_matrix(KernelKind::DotProduct, &test_x, &cond, cfg)?;
            let k_ss = kernel_matrix(KernelKind::DotProduct, &cond, &cond, cfg)?;
            let (f, _) = posterior_mean(&k_cross, &k_ss, &cg.ys, cfg.beta)?;
            predict_labels(&f)
        }
        GeneralizeTarget::Sgc => {
            let labels = predict_labels(&cg.ys);
            let (w, b) = fit_logistic(&cond, &labels, graph.num_classes(), 500);
            let mut logits = test_x * w;
            for mut row in logits.row_iter_mut() {
                row += &b;
            }
            predict_labels(&logits)
        }
    };
    let mut out = score(&pred, &truth, graph.num_classes());
    out.wall_time_eval_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}

/// Condense with `cfg.seed + s` for each of `seeds` runs and evaluate each
/// result through [`evaluate_gp`].
pub fn condense_and_evaluate(
    prep: &PreparedGraph<'_>,
    cfg: &CondenseConfig,
    seeds: usize,
) -> Result<EvalResult> {
    let mut runs = Vec::with_capacity(seeds);
    for s in 0..seeds.max(1) {
        let run_cfg = CondenseConfig {
            seed: cfg.seed + s as u64,
            ..cfg.clone()
        };
        let start = Instant::now();
        let (cg, _) = condense_prepared(prep, &run_cfg)?;
        let condense_ms = start.elapsed().as_secs_f64() * 1e3;
        let mut r = evaluate_gp(prep, &cg, run_cfg.kernel, &run_cfg.kernel_config(&prep.propagated))?;
        r.wall_time_condense_ms = condense_ms;
        runs.push(r);
    }
    Ok(aggregate(&runs))
}

/// Random-baseline accuracy over the same seeds and evaluation path.
pub fn baseline_and_evaluate(
    prep: &PreparedGraph<'_>,
    cfg: &CondenseConfig,
    seeds: usize,
    kcenter: bool,
) -> Result<EvalResult> {
    let size: usize = class_allocation(prep.graph, cfg).iter().sum();
    let mut runs = Vec::new();
    for s in 0..seeds.max(1) {
        let seed = cfg.seed + s as u64;
        let cg = if kcenter {
            kcenter_baseline(prep, size, seed)?
        } else {
            random_baseline(prep, size, seed)?
        };
        runs.push(evaluate_gp(prep, &cg, cfg.kernel, &cfg.kernel_config(&prep.propagated))?);
    }
    Ok(aggregate(&runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub kernel: KernelKind,
    pub result: EvalResult,
}

/// Condense and evaluate once per kernel with identical seeds.
pub fn ablation_kernels(
    prep: &PreparedGraph<'_>,
    cfg: &CondenseConfig,
    kernels: &[KernelKind],
    seeds: usize,
) -> Result<Vec<AblationRow>> {
    kernels
        .iter()
        .map(|&kernel| {
            let run_cfg = CondenseConfig { kernel, ..cfg.clone() };
            Ok(AblationRow {
                kernel,
                result: condense_and_evaluate(prep, &run_cfg, seeds)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub beta: f64,
    pub k: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
}

/// Full `beta × k` grid with shared seeds. Cells run on the current rayon
/// pool; the output order follows the grid regardless of scheduling.
pub fn sweep(
    graph: &Graph,
    cfg: &CondenseConfig,
    betas: &[f64],
    ks: &[usize],
    seeds: usize,
) -> Result<Vec<SweepCell>> {
    let preps: Vec<PreparedGraph<'_>> = ks
        .iter()
        .map(|&k| {
            PreparedGraph::new(
                graph,
                CondenseConfig { k, ..cfg.clone() }.propagation(),
            )
        })
        .collect::<Result<_>>()?;
    let cells: Vec<(f64, usize)> = betas
        .iter()
        .flat_map(|&b| (0..ks.len()).map(move |ki| (b, ki)))
        .collect();
    cells
        .par_iter()
        .map(|&(beta, ki)| {
            let k = ks[ki];
            let run_cfg = CondenseConfig { beta, k, ..cfg.clone() };
            let r = condense_and_evaluate(&preps[ki], &run_cfg, seeds)?;
            Ok(SweepCell {
                beta,
                k,
                acc_mean: r.accuracy_mean,
                acc_std: r.accuracy_std,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub m: usize,
    /// Median wall time of one condensation step.
    pub step_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub n: usize,
    pub d: usize,
    pub rows: Vec<TimingRow>,
    /// Least-squares slope of log(step time) against log(m).
    pub loglog_slope: f64,
    /// Fitted `c1 m³ + c2 m n d` (milliseconds).
    pub cubic_coef: f64,
    pub linear_coef: f64,
    /// Largest ratio of measured to fitted time.
    pub max_model_ratio: f64,
    pub consistent: bool,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Least-squares slope of `y` on `x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, _) = mean_std(&lx);
    let (my, _) = mean_std(&ly);
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Non-negative least squares for `t ≈ c1 a + c2 b` over two features.
fn fit_two_term(a: &[f64], b: &[f64], t: &[f64]) -> (f64, f64) {
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
    let (aa, bb, ab, at, bt) = (dot(a, a), dot(b, b), dot(a, b), dot(a, t), dot(b, t));
    let det = aa * bb - ab * ab;
    let (c1, c2) = if det.abs() > 1e-300 {
        ((at * bb - bt * ab) / det, (bt * aa - at * ab) / det)
    } else {
        (0.0, bt / bb)
    };
    if c1 >= 0.0 && c2 >= 0.0 {
        return (c1, c2);
    }
    // one coefficient clamped at zero: keep the better single-term fit
    let only_a = (at / aa).max(0.0);
    let only_b = (bt / bb).max(0.0);
    let err = |c1: f64, c2: f64| -> f64 {
        a.iter().zip(b).zip(t).map(|((x, y), z)| (c1 * x + c2 * y - z).powi(2)).sum()
    };
    if err(only_a, 0.0) < err(0.0, only_b) {
        (only_a, 0.0)
    } else {
        (0.0, only_b)
    }
}

/// Per-step wall time across condensed sizes on a fixed graph.
///
/// Every training node is a loss row, so one step costs a kernel build over
/// `n × m` pairs plus an `m × m` factorization.
pub fn timing_bench(
    graph: &Graph,
    sizes: &[usize],
    cfg: &CondenseConfig,
    steps: usize,
) -> Result<TimingReport> {
    let prep = PreparedGraph::new(graph, cfg.propagation())?;
    let n_rows = prep.loss_rows(cfg.loss_rows).len();
    let d = graph.num_features();
    let mut rows = Vec::with_capacity(sizes.len());
    for &m in sizes {
        let run_cfg = CondenseConfig {
            size: Some(m),
            per_class: None,
            epochs: steps.max(1) + 1,
            early_stop_window: 0,
            ..cfg.clone()
        };
        let cg = initialize(&prep, &run_cfg)?;
        let obj = objective(&prep, &run_cfg)?;
        let (_, report) = run_loop(&obj, cg, &run_cfg)?;
        // first step warms caches and allocator
        rows.push(TimingRow {
            m,
            step_ms: median(report.step_ms[1..].to_vec()),
        });
    }
    let ms: Vec<f64> = rows.iter().map(|r| r.m as f64).collect();
    let ts: Vec<f64> = rows.iter().map(|r| r.step_ms).collect();
    let slope = loglog_slope(&ms, &ts);
    let cubic: Vec<f64> = ms.iter().map(|m| m.powi(3)).collect();
    let linear: Vec<f64> = ms.iter().map(|m| m * n_rows as f64 * d as f64).collect();
    let (c1, c2) = fit_two_term(&cubic, &linear, &ts);
    let max_model_ratio = rows
        .iter()
        .zip(cubic.iter().zip(&linear))
        .map(|(r, (a, b))| r.step_ms / (c1 * a + c2 * b).max(1e-12))
        .fold(0.0, f64::max);
    Ok(TimingReport {
        n: n_rows,
        d,
        rows,
        loglog_slope: slope,
        cubic_coef: c1,
        linear_coef: c2,
        max_model_ratio,
        // growth no faster than the cubic-plus-linear model, within noise
        consistent: slope <= 3.2 && max_model_ratio <= 2.0,
    })
}
