//! The condensation loop: sample structure, build kernels, score the GP
//! posterior against the original labels, step the optimizer, anneal τ.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::covariance::{FeatureScale, KernelConfig, KernelKind};
use crate::error::{GcgpError, Result};
use crate::grad::{forward_backward, Objective};
use crate::graph::{Graph, PropagationConfig};
use crate::relax::{sample_noise, RelaxedStructure, TauSchedule};

/// Where a condensed graph came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub seed: u64,
    /// Original node ids the rows were initialized from (empty for
    /// gaussian initialization).
    pub source_nodes: Vec<usize>,
    /// Original edges among `source_nodes`, kept for reference by the
    /// selection baselines (they are evaluated without structure).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub induced_adjacency: Option<DMatrix<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Learnable synthetic graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedGraph {
    pub xs: DMatrix<f64>,
    /// Label matrix used directly as GP observations.
    pub ys: DMatrix<f64>,
    pub structure: RelaxedStructure,
    pub provenance: Provenance,
}

impl CondensedGraph {
    pub fn new(xs: DMatrix<f64>, ys: DMatrix<f64>, structure: RelaxedStructure) -> Self {
        Self {
            xs,
            ys,
            structure,
            provenance: Provenance::default(),
        }
    }

    pub fn m(&self) -> usize {
        self.xs.nrows()
    }

    /// Normalized adjacency for evaluation: discretized when the structure
    /// is learned, `None` (identity) otherwise.
    pub fn final_adjacency(&self) -> Result<Option<DMatrix<f64>>> {
        if !self.structure.learn_structure {
            return Ok(None);
        }
        crate::graph::normalize_adjacency(&self.structure.discretize()).map(Some)
    }

    /// `Â_S^k X^S` with the discretized structure.
    pub fn propagated_features(&self, k: usize) -> Result<DMatrix<f64>> {
        match self.final_adjacency()? {
            Some(a) => crate::graph::propagate(&a, &self.xs, k),
            None => Ok(self.xs.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Which target rows enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossRows {
    #[default]
    Train,
    AllLabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Rows copied from class-stratified training nodes.
    #[default]
    Sample,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondenseConfig {
    /// Total condensed size; split across classes in proportion to the
    /// training class counts. Ignored when `per_class` is set.
    pub size: Option<usize>,
    pub per_class: Option<usize>,
    pub k: usize,
    pub beta: f64,
    pub sigma_w2: f64,
    pub feature_scale: FeatureScale,
    pub kernel: KernelKind,
    pub row_normalize_features: bool,
    pub learn_structure: bool,
    pub learning_rate: f64,
    /// Step size for log α; defaults to `learning_rate`.
    pub structure_learning_rate: Option<f64>,
    pub epochs: usize,
    pub tau: TauSchedule,
    pub alpha_init_std: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub loss_rows: LossRows,
    pub batch_rows: Option<usize>,
    pub init: InitKind,
    pub freeze_labels: bool,
    pub fixed_noise: bool,
    /// Stop when the relative loss change over `early_stop_window` steps
    /// falls below `early_stop_tol`.
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        Self {
            size: None,
            per_class: Some(10),
            k: 2,
            beta: 0.5,
            sigma_w2: 1.0,
            feature_scale: FeatureScale::Auto,
            kernel: KernelKind::Arcsine,
            row_normalize_features: true,
            learn_structure: false,
            learning_rate: 0.01,
            structure_learning_rate: None,
            epochs: 300,
            tau: TauSchedule::default(),
            alpha_init_std: 0.5,
            optimizer: OptimizerKind::adam(),
            seed: 0,
            loss_rows: LossRows::Train,
            batch_rows: None,
            init: InitKind::Sample,
            freeze_labels: false,
            fixed_noise: false,
            early_stop_window: 50,
            early_stop_tol: 1e-6,
        }
    }
}

impl CondenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size.is_none() && self.per_class.is_none() {
            return Err(GcgpError::validation("either size or per_class must be set"));
        }
        if self.per_class == Some(0) || self.size == Some(0) {
            return Err(GcgpError::validation("condensed size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GcgpError::validation(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(lr) = self.structure_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(GcgpError::validation(format!(
                    "structure learning rate must be positive, got {lr}"
                )));
            }
        }
        if !(self.alpha_init_std >= 0.0) {
            return Err(GcgpError::validation("alpha_init_std must be non-negative"));
        }
        if self.batch_rows == Some(0) {
            return Err(GcgpError::validation("batch_rows must be positive"));
        }
        if self.learn_structure {
            self.tau.validate()?;
        }
        PropagationConfig {
            k: self.k,
            row_normalize_features: self.row_normalize_features,
        }
        .validate()?;
        self.feature_scale.validate()?;
        KernelConfig {
            feature_scale: 1.0,
            ..self.kernel_config(&DMatrix::zeros(0, 1))
        }
        .validate()
    }

    pub fn propagation(&self) -> PropagationConfig {
        PropagationConfig {
            k: self.k,
            row_normalize_features: self.row_normalize_features,
        }
    }

    /// Kernel settings for propagated target features `features`.
    pub fn kernel_config(&self, features: &DMatrix<f64>) -> KernelConfig {
        KernelConfig {
            k: self.k,
            beta: self.beta,
            sigma_w2: self.sigma_w2,
            feature_scale: self.feature_scale.resolve(features),
        }
    }
}

/// A graph with its propagated features cached for one propagation setting.
#[derive(Debug, Clone)]
pub struct PreparedGraph<'a> {
    pub graph: &'a Graph,
    pub propagation: PropagationConfig,
    pub propagated: DMatrix<f64>,
}

impl<'a> PreparedGraph<'a> {
    pub fn new(graph: &'a Graph, propagation: PropagationConfig) -> Result<Self> {
        let propagated = graph.propagated_features(&propagation)?;
        Ok(Self {
            graph,
            propagation,
            propagated,
        })
    }

    /// Supervised rows for `mode`.
    pub fn loss_rows(&self, mode: LossRows) -> Vec<usize> {
        match mode {
            LossRows::Train => self.graph.splits().train.clone(),
            LossRows::AllLabeled => (0..self.graph.num_nodes()).collect(),
        }
    }
}

/// Splits `total` across classes proportionally to `counts` (largest
/// remainder). When `total` allows it, every class with training nodes
/// gets at least one.
pub fn allocate_per_class(counts: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = counts.iter().sum();
    if sum == 0 {
        return vec![0; counts.len()];
    }
    let mut alloc: Vec<usize> = counts.iter().map(|&c| c * total / sum).collect();
    let mut rema: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (c * total % sum, i))
        .collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = total - alloc.iter().sum::<usize>();
    for &(_, i) in rema.iter().cycle() {
        if left == 0 {
            break;
        }
        alloc[i] += 1;
        left -= 1;
    }
    let nonempty = counts.iter().filter(|&&c| c > 0).count();
    if total >= nonempty {
        for (a, &c) in alloc.iter_mut().zip(counts) {
            if c > 0 && *a == 0 {
                *a = 1;
            }
        }
        // pay for the bumps from the largest classes
        while alloc.iter().sum::<usize>() > total {
            let big = (0..alloc.len()).max_by_key(|&i| (alloc[i], std::cmp::Reverse(i))).unwrap();
            alloc[big] -= 1;
        }
    }
    alloc
}

/// Class-stratified sample of training nodes. Returns the node ids and any
/// warnings about classes sampled with replacement.
pub fn stratified_sample<R: Rng + ?Sized>(
    graph: &Graph,
    per_class: &[usize],
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<String>)> {
    let by_class = graph.train_by_class();
    let mut nodes = Vec::new();
    let mut warnings = Vec::new();
    for (c, (pool, &want)) in by_class.iter().zip(per_class).enumerate() {
        if want == 0 {
            continue;
        }
        if pool.is_empty() {
            return Err(GcgpError::validation(format!(
                "class {c} has no training nodes to initialize from"
            )));
        }
        if want <= pool.len() {
            let mut picked: Vec<usize> = sample(rng, pool.len(), want).into_iter().map(|i| pool[i]).collect();
            picked.sort_unstable();
            nodes.extend(picked);
        } else {
            let msg = format!(
                "class {c} has {} training nodes but {want} were requested; sampling with replacement",
                pool.len()
            );
            log::warn!("{msg}");
            warnings.push(msg);
            nodes.extend(pool.iter().copied());
            for _ in pool.len()..want {
                nodes.push(pool[rng.random_range(0..pool.len())]);
            }
        }
    }
    Ok((nodes, warnings))
}

/// Per-class counts for a config against a graph.
pub fn class_allocation(graph: &Graph, cfg: &CondenseConfig) -> Vec<usize> {
    let counts: Vec<usize> = graph.train_by_class().iter().map(Vec::len).collect();
    match cfg.per_class {
        Some(p) => vec![p; counts.len()],
        None => allocate_per_class(&counts, cfg.size.unwrap_or(0)),
    }
}

/// Initial condensed graph.
pub fn initialize(prep: &PreparedGraph<'_>, cfg: &CondenseConfig) -> Result<CondensedGraph> {
    cfg.validate()?;
    let graph = prep.graph;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let alloc = class_allocation(graph, cfg);
    let (nodes, warnings) = stratified_sample(graph, &alloc, &mut rng)?;
    let m = nodes.len();
    if m > graph.num_nodes() {
        return Err(GcgpError::validation(format!(
            "condensed size {m} exceeds the {} original nodes",
            graph.num_nodes()
        )));
    }
    let ys = graph.one_hot(&nodes);
    let (xs, source_nodes) = match cfg.init {
        InitKind::Sample => (prep.propagated.select_rows(&nodes), nodes),
        InitKind::Gaussian => {
            let x = &prep.propagated;
            let len = x.len().max(1) as f64;
            let mean = x.sum() / len;
            let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len).sqrt().max(1e-12);
            let normal = Normal::new(0.0, std).expect("finite std");
            (DMatrix::from_fn(m, x.ncols(), |_, _| normal.sample(&mut rng)), Vec::new())
        }
    };
    let structure = if cfg.learn_structure {
        RelaxedStructure::random(m, cfg.alpha_init_std, cfg.tau.tau0, cfg.seed, &mut rng)
    } else {
        RelaxedStructure::disabled(m, cfg.seed)
    };
    Ok(CondensedGraph {
        xs,
        ys,
        structure,
        provenance: Provenance {
            method: "gcgp".into(),
            seed: cfg.seed,
            source_nodes,
            induced_adjacency: None,
            warnings,
        },
    })
}

#[derive(Debug, Clone)]
struct AdamState {
    m: DMatrix<f64>,
    v: DMatrix<f64>,
}

/// Elementwise first-order optimizer over the parameter groups.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    state: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            state: Vec::new(),
        }
    }

    /// One update; `params[i]` moves against `grads[i]`.
    pub fn step(&mut self, params: &mut [&mut DMatrix<f64>], grads: &[&DMatrix<f64>]) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    **p -= *g * self.lr;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.state.is_empty() {
                    self.state = grads
                        .iter()
                        .map(|g| AdamState {
                            m: DMatrix::zeros(g.nrows(), g.ncols()),
                            v: DMatrix::zeros(g.nrows(), g.ncols()),
                        })
                        .collect();
                }
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.state) {
                    for ((pv, &gv), (mv, vv)) in p
                        .iter_mut()
                        .zip(g.iter())
                        .zip(s.m.iter_mut().zip(s.v.iter_mut()))
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        *pv -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Per-run record of the optimization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CondenseReport {
    pub loss_history: Vec<f64>,
    pub tau_history: Vec<f64>,
    pub step_ms: Vec<f64>,
    pub total_ms: f64,
    pub steps_run: usize,
    pub early_stopped_at: Option<usize>,
    pub clamp_events: usize,
    pub max_jitter: f64,
    pub seed: u64,
    pub m: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Builds the loss objective for a prepared graph.
pub fn objective(prep: &PreparedGraph<'_>, cfg: &CondenseConfig) -> Result<Objective> {
    let rows = prep.loss_rows(cfg.loss_rows);
    if rows.is_empty() {
        return Err(GcgpError::validation("no supervised rows for the loss"));
    }
    Objective::new(
        prep.propagated.select_rows(&rows),
        prep.graph.one_hot(&rows),
        cfg.kernel,
        cfg.kernel_config(&prep.propagated),
    )
}

/// Runs the condensation loop from scratch.
pub fn condense(graph: &Graph, cfg: &CondenseConfig) -> Result<(CondensedGraph, CondenseReport)> {
    let prep = PreparedGraph::new(graph, cfg.propagation())?;
    condense_prepared(&prep, cfg)
}

/// Runs the condensation loop on a graph whose propagation is cached.
pub fn condense_prepared(
    prep: &PreparedGraph<'_>,
    cfg: &CondenseConfig,
) -> Result<(CondensedGraph, CondenseReport)> {
    if prep.propagation != cfg.propagation() {
        return Err(GcgpError::validation(
            "prepared graph propagation does not match the condense config",
        ));
    }
    let cg = initialize(prep, cfg)?;
    let obj = objective(prep, cfg)?;
    run_loop(&obj, cg, cfg)
}

/// The optimization loop proper, starting from `cg`.
pub fn run_loop(
    obj: &Objective,
    mut cg: CondensedGraph,
    cfg: &CondenseConfig,
) -> Result<(CondensedGraph, CondenseReport)> {
    let start = Instant::now();
    // independent stream for per-step noise and batches
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut opt_alpha = Optimizer::new(
        cfg.optimizer,
        cfg.structure_learning_rate.unwrap_or(cfg.learning_rate),
    );
    let mut report = CondenseReport {
        seed: cfg.seed,
        m: cg.m(),
        warnings: cg.provenance.warnings.clone(),
        ..Default::default()
    };
    let m = cg.m();
    let fixed = (cfg.learn_structure && cfg.fixed_noise).then(|| sample_noise(&mut rng, m));
    let total_rows = obj.target_features.nrows();

    for step in 0..cfg.epochs {
        let t0 = Instant::now();
        let tau = if cfg.learn_structure {
            cfg.tau.at(step, cfg.epochs)?
        } else {
            cg.structure.tau
        };
        cg.structure.tau = tau;
        let noise = if cfg.learn_structure {
            Some(match &fixed {
                Some(n) => n.clone(),
                None => sample_noise(&mut rng, m),
            })
        } else {
            None
        };
        let batch;
        let step_obj = match cfg.batch_rows {
            Some(b) if b < total_rows => {
                let mut rows = sample(&mut rng, total_rows, b).into_vec();
                rows.sort_unstable();
                batch = obj.rows(&rows);
                &batch
            }
            _ => obj,
        };
        let bundle = forward_backward(step_obj, &cg, noise.as_ref()).map_err(|e| match e {
            GcgpError::NonFinite { stage, .. } => GcgpError::NonFinite { stage, step: Some(step) },
            other => other,
        })?;
        if !bundle.loss.is_finite() {
            return Err(GcgpError::NonFinite {
                stage: "loss",
                step: Some(step),
            });
        }
        report.clamp_events += bundle.clamped;
        report.max_jitter = report.max_jitter.max(bundle.jitter_used);

        let mut params: Vec<&mut DMatrix<f64>> = vec![&mut cg.xs];
        let mut grads: Vec<&DMatrix<f64>> = vec![&bundle.grad_xs];
        if !cfg.freeze_labels {
            params.push(&mut cg.ys);
            grads.push(&bundle.grad_ys);
        }
        opt.step(&mut params, &grads);
        if cfg.learn_structure {
            opt_alpha.step(&mut [&mut cg.structure.log_alpha], &[&bundle.grad_log_alpha]);
        }

        report.loss_history.push(bundle.loss);
        report.tau_history.push(tau);
        report.step_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        report.steps_run = step + 1;

        let w = cfg.early_stop_window;
        if w > 0 && report.loss_history.len() > w {
            let now = bundle.loss;
            let before = report.loss_history[report.loss_history.len() - 1 - w];
            if (now - before).abs() <= cfg.early_stop_tol * before.abs().max(f64::MIN_POSITIVE) {
                report.early_stopped_at = Some(step);
                break;
            }
        }
    }
    if cfg.learn_structure && cfg.epochs > 0 {
        cg.structure.tau = cfg.tau.at(cfg.epochs, cfg.epochs)?;
    }
    report.total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((cg, report))
}
