//! Gaussian-process posterior conditioned on the condensed observations.

use nalgebra::DMatrix;

use crate::error::{GcgpError, Result};

/// First jitter added to the diagonal when factorization fails.
pub const INITIAL_JITTER: f64 = 1e-8;
/// Retries after the unjittered attempt; jitter grows ×10 per retry.
pub const MAX_JITTER_RETRIES: usize = 3;

/// Plain Cholesky `M = L Lᵀ`. On failure returns the column whose pivot was
/// not positive.
pub fn cholesky(m: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, usize> {
    let n = m.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = m[(j, j)];
        for p in 0..j {
            diag -= l[(j, p)] * l[(j, p)];
        }
        if !(diag > 0.0 && diag.is_finite()) {
            return Err(j);
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for p in 0..j {
                s -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Factorization of `K_ss + (beta + jitter) I` and the weights `M⁻¹ Y^S`.
#[derive(Debug, Clone)]
pub struct PosteriorSolve {
    pub chol: DMatrix<f64>,
    pub weights: DMatrix<f64>,
    pub jitter_used: f64,
}

impl PosteriorSolve {
    pub fn new(k_ss: &DMatrix<f64>, y_s: &DMatrix<f64>, beta: f64) -> Result<Self> {
        if !k_ss.is_square() {
            return Err(GcgpError::shape(
                "posterior K_ss",
                "square",
                format!("{}x{}", k_ss.nrows(), k_ss.ncols()),
            ));
        }
        if y_s.nrows() != k_ss.nrows() {
            return Err(GcgpError::shape("posterior Y_s rows", k_ss.nrows(), y_s.nrows()));
        }
        let (chol, jitter_used) = factor_with_jitter(k_ss, beta)?;
        let weights = solve_with_factor(&chol, y_s);
        Ok(Self {
            chol,
            weights,
            jitter_used,
        })
    }

    /// `(K_ss + (beta + jitter) I)⁻¹ b`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        solve_with_factor(&self.chol, b)
    }
}

/// Factors `k + (beta + jitter) I`, escalating jitter on failure.
pub fn factor_with_jitter(k: &DMatrix<f64>, beta: f64) -> Result<(DMatrix<f64>, f64)> {
    let m = k.nrows();
    let mut jitter = 0.0;
    let mut failed_at = 0;
    for attempt in 0..=MAX_JITTER_RETRIES {
        if attempt > 0 {
            jitter = INITIAL_JITTER * 10f64.powi(attempt as i32 - 1);
        }
        let mut shifted = k.clone();
        for i in 0..m {
            shifted[(i, i)] += beta + jitter;
        }
        match cholesky(&shifted) {
            Ok(l) => {
                if attempt > 0 {
                    log::warn!("kernel factorization needed jitter {jitter:e}");
                }
                return Ok((l, jitter));
            }
            Err(col) => failed_at = col,
        }
    }
    let mut nodes: Vec<usize> = (0..m).collect();
    nodes.sort_by(|&a, &b| k[(a, a)].total_cmp(&k[(b, b)]));
    nodes.truncate(3);
    if !nodes.contains(&failed_at) {
        nodes.insert(0, failed_at);
    }
    Err(GcgpError::SingularKernel { jitter, nodes })
}

/// `L⁻ᵀ L⁻¹ b` with two triangular solves.
pub fn solve_with_factor(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let y = l
        .solve_lower_triangular(b)
        .expect("cholesky factor has positive diagonal");
    l.tr_solve_lower_triangular(&y)
        .expect("cholesky factor has positive diagonal")
}

/// `K_cross (K_ss + beta I)⁻¹ Y_s`.
pub fn posterior_mean(
    k_cross: &DMatrix<f64>,
    k_ss: &DMatrix<f64>,
    y_s: &DMatrix<f64>,
    beta: f64,
) -> Result<(DMatrix<f64>, PosteriorSolve)> {
    if k_cross.ncols() != k_ss.nrows() {
        return Err(GcgpError::shape(
            "posterior K_cross columns",
            k_ss.nrows(),
            k_cross.ncols(),
        ));
    }
    let solve = PosteriorSolve::new(k_ss, y_s, beta)?;
    Ok((k_cross * &solve.weights, solve))
}

/// `K_tt − K_cross (K_ss + beta I)⁻¹ K_crossᵀ`.
pub fn posterior_cov(
    k_tt: &DMatrix<f64>,
    k_cross: &DMatrix<f64>,
    k_ss: &DMatrix<f64>,
    beta: f64,
) -> Result<DMatrix<f64>> {
    if k_tt.nrows() != k_cross.nrows() || !k_tt.is_square() {
        return Err(GcgpError::shape(
            "posterior K_tt",
            format!("{0}x{0}", k_cross.nrows()),
            format!("{}x{}", k_tt.nrows(), k_tt.ncols()),
        ));
    }
    if k_cross.ncols() != k_ss.nrows() {
        return Err(GcgpError::shape(
            "posterior K_cross columns",
            k_ss.nrows(),
            k_cross.ncols(),
        ));
    }
    if k_ss.nrows() == 0 {
        return Ok(k_tt.clone());
    }
    let (l, _) = factor_with_jitter(k_ss, beta)?;
    let v = l
        .solve_lower_triangular(&k_cross.transpose())
        .expect("cholesky factor has positive diagonal");
    Ok(k_tt - v.transpose() * v)
}

/// Squared Frobenius distance between predictions and one-hot targets.
/// Both matrices hold only the supervised rows.
pub fn condensation_loss(f_bar: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if f_bar.shape() != y.shape() {
        return Err(GcgpError::shape(
            "condensation loss",
            format!("{:?}", y.shape()),
            format!("{:?}", f_bar.shape()),
        ));
    }
    Ok((f_bar - y).norm_squared())
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict_labels(f_bar: &DMatrix<f64>) -> Vec<usize> {
    f_bar
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
