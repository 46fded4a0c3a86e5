//! Reverse-mode differentiation of the condensation loss.
//!
//! The tape records matrix-level operations only: matrix products, the
//! relaxed adjacency sample, symmetric normalization, the kernel maps, the
//! regularized solve and the squared error. Every node keeps the values its
//! adjoint needs, so one forward pass followed by [`Tape::backward`] yields
//! exact gradients for the noise that was fixed during the pass.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condense::CondensedGraph;
use crate::covariance::{arcsine_parts, KernelConfig, KernelKind, ASIN_LIMIT};
use crate::error::{GcgpError, Result};
use crate::gp::{factor_with_jitter, solve_with_factor};
use crate::relax::relaxed_adjacency;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Constant,
    MatMul(usize, usize),
    RelaxedAdjacency {
        log_alpha: usize,
        tau: f64,
    },
    Normalize {
        input: usize,
        tilde: DMatrix<f64>,
        inv_sqrt: Vec<f64>,
    },
    Arcsine {
        left: usize,
        right: usize,
        scale: f64,
        z: DMatrix<f64>,
        left_self: Vec<f64>,
        right_self: Vec<f64>,
    },
    Dot {
        left: usize,
        right: usize,
        scale: f64,
    },
    Solve {
        kernel: usize,
        rhs: usize,
        chol: DMatrix<f64>,
    },
    SquaredError {
        pred: usize,
        residual: DMatrix<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: DMatrix<f64>,
    op: Op,
    needs_grad: bool,
}

/// Matrix-level reverse-mode tape. Not reentrant: build one per pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamped: usize,
    jitter: f64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: DMatrix<f64>, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Input => true,
            Op::Constant => false,
            Op::MatMul(a, b) => self.nodes[*a].needs_grad || self.nodes[*b].needs_grad,
            Op::RelaxedAdjacency { log_alpha, .. } => self.nodes[*log_alpha].needs_grad,
            Op::Normalize { input, .. } => self.nodes[*input].needs_grad,
            Op::Arcsine { left, right, .. } | Op::Dot { left, right, .. } => {
                self.nodes[*left].needs_grad || self.nodes[*right].needs_grad
            }
            Op::Solve { kernel, rhs, .. } => self.nodes[*kernel].needs_grad || self.nodes[*rhs].needs_grad,
            Op::SquaredError { pred, .. } => self.nodes[*pred].needs_grad,
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    pub fn value(&self, v: Var) -> &DMatrix<f64> {
        &self.nodes[v.0].value
    }

    /// Asin arguments clamped so far.
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    /// Largest jitter used by any solve on this tape.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn input(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Input)
    }

    /// A value that receives no adjoint.
    pub fn constant(&mut self, value: DMatrix<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::MatMul(a.0, b.0))
    }

    /// Relaxed concrete sample for fixed logistic `noise`.
    pub fn relaxed_adjacency(&mut self, log_alpha: Var, noise: &DMatrix<f64>, tau: f64) -> Result<Var> {
        let value = relaxed_adjacency(self.value(log_alpha), noise, tau)?;
        Ok(self.push(value, Op::RelaxedAdjacency { log_alpha: log_alpha.0, tau }))
    }

    /// `D̃^{-1/2} (A + I) D̃^{-1/2}`, differentiating through the degrees.
    pub fn normalize(&mut self, a: Var) -> Var {
        let mut tilde = self.value(a).clone();
        let m = tilde.nrows();
        for i in 0..m {
            tilde[(i, i)] += 1.0;
        }
        let inv_sqrt: Vec<f64> = (0..m).map(|i| 1.0 / tilde.row(i).sum().sqrt()).collect();
        let value = DMatrix::from_fn(m, m, |i, j| tilde[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
        self.push(
            value,
            Op::Normalize {
                input: a.0,
                tilde,
                inv_sqrt,
            },
        )
    }

    pub fn kernel(&mut self, kind: KernelKind, left: Var, right: Var, cfg: &KernelConfig) -> Result<Var> {
        match kind {
            KernelKind::Arcsine => {
                let parts = arcsine_parts(self.value(left), self.value(right), cfg)?;
                self.clamped += parts.clamped;
                Ok(self.push(
                    parts.kernel,
                    Op::Arcsine {
                        left: left.0,
                        right: right.0,
                        scale: cfg.sigma_w2 * cfg.feature_scale,
                        z: parts.z,
                        left_self: parts.left_self,
                        right_self: parts.right_self,
                    },
                ))
            }
            KernelKind::DotProduct => {
                let value = self.value(left) * self.value(right).transpose() * cfg.feature_scale;
                Ok(self.push(
                    value,
                    Op::Dot {
                        left: left.0,
                        right: right.0,
                        scale: cfg.feature_scale,
                    },
                ))
            }
        }
    }

    /// `(K + (beta + jitter) I)⁻¹ Y`.
    pub fn solve(&mut self, kernel: Var, rhs: Var, beta: f64) -> Result<Var> {
        let (chol, jitter) = factor_with_jitter(self.value(kernel), beta)?;
        self.jitter = self.jitter.max(jitter);
        let value = solve_with_factor(&chol, self.value(rhs));
        Ok(self.push(
            value,
            Op::Solve {
                kernel: kernel.0,
                rhs: rhs.0,
                chol,
            },
        ))
    }

    /// `‖pred − target‖_F²` as a 1×1 node.
    pub fn squared_error(&mut self, pred: Var, target: &DMatrix<f64>) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return Err(GcgpError::shape(
                "squared error",
                format!("{:?}", target.shape()),
                format!("{:?}", self.value(pred).shape()),
            ));
        }
        let residual = self.value(pred) - target;
        let value = DMatrix::from_element(1, 1, residual.norm_squared());
        Ok(self.push(value, Op::SquaredError { pred: pred.0, residual }))
    }

    /// Adjoints of every node with respect to the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<DMatrix<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(DMatrix::from_element(1, 1, 1.0));

        fn acc(grads: &mut [Option<DMatrix<f64>>], idx: usize, g: DMatrix<f64>) {
            match &mut grads[idx] {
                Some(existing) => *existing += g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Constant => {}
                Op::MatMul(a, b) => {
                    if self.needs_grad(*a) {
                        let ga = &g * self.nodes[*b].value.transpose();
                        acc(&mut grads, *a, ga);
                    }
                    if self.needs_grad(*b) {
                        let gb = self.nodes[*a].value.transpose() * &g;
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::RelaxedAdjacency { log_alpha, tau } => {
                    let a = &node.value;
                    let m = a.nrows();
                    let mut gl = DMatrix::zeros(m, m);
                    for j in 0..m {
                        for i in 0..j {
                            let v = a[(i, j)];
                            // both mirrored entries share one logit, which is
                            // the mean of the two stored parameters
                            let shared = (g[(i, j)] + g[(j, i)]) * v * (1.0 - v) / tau;
                            gl[(i, j)] = 0.5 * shared;
                            gl[(j, i)] = 0.5 * shared;
                        }
                    }
                    acc(&mut grads, *log_alpha, gl);
                }
                Op::Normalize {
                    input,
                    tilde,
                    inv_sqrt,
                } => {
                    let m = tilde.nrows();
                    let mut g_in = DMatrix::from_fn(m, m, |i, j| g[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
                    let mut g_deg = vec![0.0; m];
                    for i in 0..m {
                        let mut gs = 0.0;
                        for j in 0..m {
                            gs += (g[(i, j)] * tilde[(i, j)] + g[(j, i)] * tilde[(j, i)]) * inv_sqrt[j];
                        }
                        // s = deg^{-1/2}  =>  ds/ddeg = -s³/2
                        g_deg[i] = -0.5 * gs * inv_sqrt[i].powi(3);
                    }
                    for j in 0..m {
                        for i in 0..m {
                            g_in[(i, j)] += g_deg[i];
                        }
                    }
                    acc(&mut grads, *input, g_in);
                }
                Op::Arcsine {
                    left,
                    right,
                    scale,
                    z,
                    left_self,
                    right_self,
                } => {
                    let (n, m) = z.shape();
                    let lr: Vec<f64> = left_self.iter().map(|s| 1.0 + 2.0 * s).collect();
                    let rr: Vec<f64> = right_self.iter().map(|s| 1.0 + 2.0 * s).collect();
                    let mut g_s = DMatrix::zeros(n, m);
                    let mut g_lself = vec![0.0; n];
                    let mut g_rself = vec![0.0; m];
                    for j in 0..m {
                        for i in 0..n {
                            let zij = z[(i, j)];
                            if zij.abs() >= ASIN_LIMIT {
                                continue;
                            }
                            let gz = g[(i, j)] * std::f64::consts::FRAC_2_PI / (1.0 - zij * zij).sqrt();
                            g_s[(i, j)] = gz * 2.0 / (lr[i] * rr[j]).sqrt();
                            g_lself[i] -= gz * zij / lr[i];
                            g_rself[j] -= gz * zij / rr[j];
                        }
                    }
                    let lv = &self.nodes[*left].value;
                    let rv = &self.nodes[*right].value;
                    if self.needs_grad(*left) {
                        let mut gl = &g_s * rv * *scale;
                        for (i, gi) in g_lself.iter().enumerate() {
                            let row = lv.row(i) * (2.0 * scale * gi);
                            let mut dst = gl.row_mut(i);
                            dst += row;
                        }
                        acc(&mut grads, *left, gl);
                    }
                    if self.needs_grad(*right) {
                        let mut gr = g_s.transpose() * lv * *scale;
                        for (j, gj) in g_rself.iter().enumerate() {
                            let row = rv.row(j) * (2.0 * scale * gj);
                            let mut dst = gr.row_mut(j);
                            dst += row;
                        }
                        acc(&mut grads, *right, gr);
                    }
                }
                Op::Dot { left, right, scale } => {
                    if self.needs_grad(*left) {
                        let gl = &g * &self.nodes[*right].value * *scale;
                        acc(&mut grads, *left, gl);
                    }
                    if self.needs_grad(*right) {
                        let gr = g.transpose() * &self.nodes[*left].value * *scale;
                        acc(&mut grads, *right, gr);
                    }
                }
                Op::Solve { kernel, rhs, chol } => {
                    let g_rhs = solve_with_factor(chol, &g);
                    if self.needs_grad(*kernel) {
                        let g_k = -(&g_rhs * node.value.transpose());
                        acc(&mut grads, *kernel, g_k);
                    }
                    if self.needs_grad(*rhs) {
                        acc(&mut grads, *rhs, g_rhs);
                    }
                }
                Op::SquaredError { pred, residual } => {
                    acc(&mut grads, *pred, residual * (2.0 * g[(0, 0)]));
                }
            }
            grads[idx] = Some(g);
        }
        Gradients(grads)
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<DMatrix<f64>>>);

impl Gradients {
    /// Gradient of a node, zeros when the output does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> DMatrix<f64> {
        self.0[v.0].clone().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            DMatrix::zeros(r, c)
        })
    }
}

/// The fixed part of the condensation objective: propagated feature rows of
/// the supervised target nodes and their one-hot labels.
#[derive(Debug, Clone)]
pub struct Objective {
    pub target_features: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub kernel: KernelKind,
    pub cfg: KernelConfig,
}

impl Objective {
    pub fn new(
        target_features: DMatrix<f64>,
        targets: DMatrix<f64>,
        kernel: KernelKind,
        cfg: KernelConfig,
    ) -> Result<Self> {
        if target_features.nrows() != targets.nrows() {
            return Err(GcgpError::shape(
                "objective target rows",
                target_features.nrows(),
                targets.nrows(),
            ));
        }
        cfg.validate()?;
        Ok(Self {
            target_features,
            targets,
            kernel,
            cfg,
        })
    }

    /// Objective restricted to a subset of its rows.
    pub fn rows(&self, rows: &[usize]) -> Objective {
        Objective {
            target_features: self.target_features.select_rows(rows),
            targets: self.targets.select_rows(rows),
            kernel: self.kernel,
            cfg: self.cfg,
        }
    }
}

/// Loss value and gradients for one forward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientBundle {
    pub loss: f64,
    pub grad_xs: DMatrix<f64>,
    pub grad_ys: DMatrix<f64>,
    /// Zero when the structure is not learned.
    pub grad_log_alpha: DMatrix<f64>,
    pub clamped: usize,
    pub jitter_used: f64,
}

struct Forward {
    tape: Tape,
    xs: Var,
    ys: Var,
    log_alpha: Option<Var>,
    loss: Var,
}

fn stage_check(tape: &Tape, v: Var, stage: &'static str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(GcgpError::NonFinite { stage, step: None })
    }
}

fn forward(obj: &Objective, cg: &CondensedGraph, noise: Option<&DMatrix<f64>>) -> Result<Forward> {
    let d = obj.target_features.ncols();
    if cg.xs.ncols() != d {
        return Err(GcgpError::shape("condensed features", d, cg.xs.ncols()));
    }
    if cg.ys.ncols() != obj.targets.ncols() {
        return Err(GcgpError::shape("condensed labels", obj.targets.ncols(), cg.ys.ncols()));
    }
    let mut tape = Tape::new();
    let xs = tape.input(cg.xs.clone());
    let ys = tape.input(cg.ys.clone());
    let mut log_alpha = None;
    let mut propagated = xs;
    if cg.structure.learn_structure {
        let noise = noise.ok_or_else(|| {
            GcgpError::validation("structure learning requires concrete noise for the pass")
        })?;
        let la = tape.input(cg.structure.log_alpha.clone());
        log_alpha = Some(la);
        let a = tape.relaxed_adjacency(la, noise, cg.structure.tau)?;
        stage_check(&tape, a, "relaxed adjacency")?;
        let a_hat = tape.normalize(a);
        stage_check(&tape, a_hat, "normalization")?;
        for _ in 0..obj.cfg.k {
            propagated = tape.matmul(a_hat, propagated);
        }
        stage_check(&tape, propagated, "propagation")?;
    }
    let target = tape.constant(obj.target_features.clone());
    let k_cross = tape.kernel(obj.kernel, target, propagated, &obj.cfg)?;
    stage_check(&tape, k_cross, "cross covariance")?;
    let k_ss = tape.kernel(obj.kernel, propagated, propagated, &obj.cfg)?;
    stage_check(&tape, k_ss, "condensed covariance")?;
    let weights = tape.solve(k_ss, ys, obj.cfg.beta)?;
    stage_check(&tape, weights, "posterior solve")?;
    let f_bar = tape.matmul(k_cross, weights);
    let loss = tape.squared_error(f_bar, &obj.targets)?;
    stage_check(&tape, loss, "loss")?;
    Ok(Forward {
        tape,
        xs,
        ys,
        log_alpha,
        loss,
    })
}

/// Loss only, no reverse pass.
pub fn loss(obj: &Objective, cg: &CondensedGraph, noise: Option<&DMatrix<f64>>) -> Result<f64> {
    let fw = forward(obj, cg, noise)?;
    Ok(fw.tape.value(fw.loss)[(0, 0)])
}

/// Loss and exact gradients for the given concrete noise.
pub fn forward_backward(
    obj: &Objective,
    cg: &CondensedGraph,
    noise: Option<&DMatrix<f64>>,
) -> Result<GradientBundle> {
    let fw = forward(obj, cg, noise)?;
    let grads = fw.tape.backward(fw.loss);
    let m = cg.xs.nrows();
    let bundle = GradientBundle {
        loss: fw.tape.value(fw.loss)[(0, 0)],
        grad_xs: grads.wrt(&fw.tape, fw.xs),
        grad_ys: grads.wrt(&fw.tape, fw.ys),
        grad_log_alpha: fw
            .log_alpha
            .map(|v| grads.wrt(&fw.tape, v))
            .unwrap_or_else(|| DMatrix::zeros(m, m)),
        clamped: fw.tape.clamped(),
        jitter_used: fw.tape.jitter(),
    };
    for (name, g) in [
        ("gradient of X_s", &bundle.grad_xs),
        ("gradient of Y_s", &bundle.grad_ys),
        ("gradient of log alpha", &bundle.grad_log_alpha),
    ] {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(GcgpError::NonFinite { stage: name, step: None });
        }
    }
    Ok(bundle)
}

/// Parameter group of a checked coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Xs,
    Ys,
    LogAlpha,
}

/// Which coordinates a finite-difference check visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordinateSample {
    All,
    /// Up to `per_group` random coordinates of each group.
    Random { per_group: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub sample: CoordinateSample,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-7,
            sample: CoordinateSample::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdEntry {
    pub group: ParamGroup,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    /// Largest relative error over coordinates whose gradient magnitude
    /// exceeds the floor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

fn coordinates(rows: usize, cols: usize, sample_mode: CoordinateSample, salt: u64) -> Vec<(usize, usize)> {
    let total = rows * cols;
    match sample_mode {
        CoordinateSample::All => (0..total).map(|i| (i % rows, i / rows)).collect(),
        CoordinateSample::Random { per_group, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
            let mut idx = sample(&mut rng, total, per_group.min(total)).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| (i % rows, i / rows)).collect()
        }
    }
}

/// Compares `bundle` against central finite differences of the loss.
pub fn compare_with_finite_differences(
    obj: &Objective,
    cg: &CondensedGraph,
    noise: Option<&DMatrix<f64>>,
    bundle: &GradientBundle,
    opts: &FdOptions,
) -> Result<FdReport> {
    if !(1e-7..=1e-3).contains(&opts.step) {
        return Err(GcgpError::validation(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            opts.step
        )));
    }
    let mut groups = vec![(ParamGroup::Xs, &bundle.grad_xs, 1u64), (ParamGroup::Ys, &bundle.grad_ys, 2)];
    if cg.structure.learn_structure {
        groups.push((ParamGroup::LogAlpha, &bundle.grad_log_alpha, 3));
    }
    let mut entries = Vec::new();
    for (group, grad, salt) in groups {
        for (r, c) in coordinates(grad.nrows(), grad.ncols(), opts.sample, salt) {
            let eval = |delta: f64| -> Result<f64> {
                let mut probe = cg.clone();
                let target = match group {
                    ParamGroup::Xs => &mut probe.xs,
                    ParamGroup::Ys => &mut probe.ys,
                    ParamGroup::LogAlpha => &mut probe.structure.log_alpha,
                };
                target[(r, c)] += delta;
                loss(obj, &probe, noise)
            };
            let numeric = (eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step);
            let analytic = grad[(r, c)];
            let abs_error = (analytic - numeric).abs();
            let scale = analytic.abs().max(numeric.abs());
            let rel_error = if scale > 0.0 { abs_error / scale } else { 0.0 };
            let ok = abs_error <= opts.abs_floor || rel_error < opts.rel_tol;
            entries.push(FdEntry {
                group,
                row: r,
                col: c,
                analytic,
                numeric,
                abs_error,
                rel_error,
                ok,
            });
        }
    }
    let max_rel_error = entries
        .iter()
        .filter(|e| e.analytic.abs().max(e.numeric.abs()) > opts.abs_floor)
        .map(|e| e.rel_error)
        .fold(0.0, f64::max);
    let max_abs_error = entries.iter().map(|e| e.abs_error).fold(0.0, f64::max);
    let passed = entries.iter().all(|e| e.ok);
    Ok(FdReport {
        entries,
        max_rel_error,
        max_abs_error,
        passed,
    })
}

/// Runs [`forward_backward`] and checks it against finite differences.
pub fn finite_difference_check(
    obj: &Objective,
    cg: &CondensedGraph,
    noise: Option<&DMatrix<f64>>,
    opts: &FdOptions,
) -> Result<FdReport> {
    let bundle = forward_backward(obj, cg, noise)?;
    compare_with_finite_differences(obj, cg, noise, &bundle, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relax::{sample_noise, RelaxedStructure};
    use rand::Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s))
    }

    fn instance(learn: bool, kind: KernelKind, seed: u64) -> (Objective, CondensedGraph, Option<DMatrix<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m, d, c) = (12, 4, 5, 3);
        let x = random_mat(&mut rng, n, d, 1.0);
        let y = DMatrix::from_fn(n, c, |i, j| if i % c == j { 1.0 } else { 0.0 });
        let cfg = KernelConfig::for_dim(d, 0.3, 2);
        let obj = Objective::new(x, y, kind, cfg).unwrap();
        let structure = if learn {
            let mut s = RelaxedStructure::random(m, 0.5, 0.7, seed, &mut rng);
            // break symmetry so tied-parameter handling is exercised
            s.log_alpha[(0, 1)] += 0.2;
            s
        } else {
            RelaxedStructure::disabled(m, seed)
        };
        let cg = CondensedGraph::new(random_mat(&mut rng, m, d, 1.0), random_mat(&mut rng, m, c, 1.0), structure);
        let noise = learn.then(|| sample_noise(&mut rng, m));
        (obj, cg, noise)
    }

    #[test]
    fn matches_finite_differences_all_modes() {
        for kind in [KernelKind::Arcsine, KernelKind::DotProduct] {
            for learn in [false, true] {
                let (obj, cg, noise) = instance(learn, kind, 7);
                let report = finite_difference_check(&obj, &cg, noise.as_ref(), &FdOptions::default()).unwrap();
                assert!(report.passed, "{kind} learn={learn}: max rel {}", report.max_rel_error);
            }
        }
    }

    #[test]
    fn loss_agrees_with_gp_path() {
        let (obj, cg, _) = instance(false, KernelKind::Arcsine, 3);
        let k_cross = crate::covariance::kernel_matrix(obj.kernel, &obj.target_features, &cg.xs, &obj.cfg).unwrap();
        let k_ss = crate::covariance::kernel_matrix(obj.kernel, &cg.xs, &cg.xs, &obj.cfg).unwrap();
        let (f, _) = crate::gp::posterior_mean(&k_cross, &k_ss, &cg.ys, obj.cfg.beta).unwrap();
        let want = crate::gp::condensation_loss(&f, &obj.targets).unwrap();
        let got = forward_backward(&obj, &cg, None).unwrap().loss;
        assert!((got - want).abs() < 1e-12 * want.max(1.0));
    }

    #[test]
    fn label_gradient_has_closed_form() {
        let (obj, cg, _) = instance(false, KernelKind::Arcsine, 5);
        let b = forward_backward(&obj, &cg, None).unwrap();
        let k_cross = crate::covariance::kernel_matrix(obj.kernel, &obj.target_features, &cg.xs, &obj.cfg).unwrap();
        let k_ss = crate::covariance::kernel_matrix(obj.kernel, &cg.xs, &cg.xs, &obj.cfg).unwrap();
        let m = cg.xs.nrows();
        let inv = (k_ss + DMatrix::identity(m, m) * obj.cfg.beta).try_inverse().unwrap();
        let mm = k_cross * inv;
        let want = mm.transpose() * (&mm * &cg.ys - &obj.targets) * 2.0;
        assert!((b.grad_ys - want).amax() < 1e-10);
    }

    #[test]
    fn zero_cross_covariance_gives_zero_label_gradient() {
        // target rows orthogonal to every condensed row under the dot kernel
        let x = DMatrix::from_row_slice(3, 4, &[1., 0., 0., 0., 0., 2., 0., 0., 3., -1., 0., 0.]);
        let y = DMatrix::from_row_slice(3, 2, &[1., 0., 0., 1., 1., 0.]);
        let obj = Objective::new(x, y, KernelKind::DotProduct, KernelConfig::for_dim(4, 0.5, 0)).unwrap();
        let xs = DMatrix::from_row_slice(2, 4, &[0., 0., 1., 0., 0., 0., 0.5, 2.]);
        let cg = CondensedGraph::new(xs, DMatrix::from_element(2, 2, 0.3), RelaxedStructure::disabled(2, 0));
        let b = forward_backward(&obj, &cg, None).unwrap();
        assert_eq!(b.grad_ys, DMatrix::zeros(2, 2));
    }

    #[test]
    fn scalar_pipeline_matches_symbolic_derivative() {
        // one target, one condensed node, one feature, one class, feature_scale 1
        let cfg = KernelConfig {
            k: 0,
            beta: 0.5,
            sigma_w2: 1.0,
            feature_scale: 1.0,
        };
        let obj = Objective::new(
            DMatrix::from_element(1, 1, 0.7),
            DMatrix::from_element(1, 1, 1.0),
            KernelKind::Arcsine,
            cfg,
        )
        .unwrap();
        let cg = CondensedGraph::new(
            DMatrix::from_element(1, 1, -0.3),
            DMatrix::from_element(1, 1, 0.8),
            RelaxedStructure::disabled(1, 0),
        );
        let b = forward_backward(&obj, &cg, None).unwrap();
        // values from symbolic differentiation of the closed-form scalar loss
        assert!((b.loss - 0.747_700_963_160_866_6).abs() < 1e-12);
        assert!((b.grad_xs[(0, 0)] - -0.692_269_662_708_167_4).abs() < 1e-12);
        assert!((b.grad_ys[(0, 0)] - -0.292_490_180_787_665_5).abs() < 1e-12);
    }

    #[test]
    fn gradients_vanish_at_exact_fit() {
        // with m = n, targets equal to condensed points and tiny beta the
        // posterior reproduces the labels; choose Y_s so the fit is exact
        let (obj, mut cg, _) = instance(false, KernelKind::Arcsine, 9);
        cg.xs = obj.target_features.rows(0, 4).into_owned();
        let obj = obj.rows(&[0, 1, 2, 3]);
        let k = crate::covariance::kernel_matrix(obj.kernel, &cg.xs, &cg.xs, &obj.cfg).unwrap();
        let m = 4;
        let shifted = &k + DMatrix::identity(m, m) * obj.cfg.beta;
        // f = K (K + βI)⁻¹ Y_s = Y  =>  Y_s = (K + βI) K⁻¹ Y
        cg.ys = shifted * k.try_inverse().unwrap() * &obj.targets;
        let b = forward_backward(&obj, &cg, None).unwrap();
        assert!(b.loss < 1e-18);
        assert!(b.grad_xs.amax() < 1e-10 && b.grad_ys.amax() < 1e-10);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let (obj, cg, noise) = instance(true, KernelKind::Arcsine, 4);
        let mut bundle = forward_backward(&obj, &cg, noise.as_ref()).unwrap();
        bundle.grad_xs[(1, 2)] += 0.1;
        let report =
            compare_with_finite_differences(&obj, &cg, noise.as_ref(), &bundle, &FdOptions::default()).unwrap();
        assert!(!report.passed);
        assert!(report.entries.iter().any(|e| !e.ok && e.group == ParamGroup::Xs && e.row == 1 && e.col == 2));
    }

    #[test]
    fn check_is_deterministic() {
        let (obj, cg, noise) = instance(true, KernelKind::Arcsine, 2);
        let opts = FdOptions {
            sample: CoordinateSample::Random { per_group: 5, seed: 1 },
            ..FdOptions::default()
        };
        let a = finite_difference_check(&obj, &cg, noise.as_ref(), &opts).unwrap();
        let b = finite_difference_check(&obj, &cg, noise.as_ref(), &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.entries.len(), 15);
    }

    #[test]
    fn rejects_bad_step_and_missing_noise() {
        let (obj, cg, noise) = instance(true, KernelKind::Arcsine, 2);
        let opts = FdOptions { step: 1e-2, ..FdOptions::default() };
        assert!(finite_difference_check(&obj, &cg, noise.as_ref(), &opts).is_err());
        assert!(forward_backward(&obj, &cg, None).is_err());
    }

    #[test]
    fn structure_gradient_zero_when_disabled() {
        let (obj, cg, _) = instance(false, KernelKind::Arcsine, 1);
        let b = forward_backward(&obj, &cg, None).unwrap();
        assert_eq!(b.grad_log_alpha, DMatrix::zeros(4, 4));
    }
}
