//! Arcsine covariance of an infinite-width erf network over propagated node
//! features, and the plain dot-product kernel used as an ablation baseline.
//!
//! With `s(a, b) = sigma_w2 * feature_scale * (a · b) + beta` the arcsine
//! entry is
//!
//! ```text
//! K(a, b) = 2/π · asin( 2 s(a,b) / sqrt((1 + 2 s(a,a)) (1 + 2 s(b,b))) )
//! ```
//!
//! Matrices are built as a Gram product followed by an entrywise map, so the
//! result does not depend on how rows are split across threads.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GcgpError, Result};
use crate::graph::{propagate, NormalizedAdjacency};

/// Largest magnitude allowed for the asin argument.
pub const ASIN_LIMIT: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub k: usize,
    /// Noise and bias variance.
    pub beta: f64,
    pub sigma_w2: f64,
    /// Multiplier on feature inner products.
    pub feature_scale: f64,
}

/// How the inner-product multiplier of a [`KernelConfig`] is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "ScaleRepr", into = "ScaleRepr")]
pub enum FeatureScale {
    /// Reciprocal of the mean squared row norm of the propagated features,
    /// so that `feature_scale · ‖x̂‖²` averages to one.
    #[default]
    Auto,
    /// `1/d`.
    InverseDim,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScaleRepr {
    Fixed(f64),
    Named(String),
}

impl TryFrom<ScaleRepr> for FeatureScale {
    type Error = GcgpError;

    fn try_from(r: ScaleRepr) -> Result<Self> {
        match r {
            ScaleRepr::Fixed(v) => Ok(FeatureScale::Fixed(v)),
            ScaleRepr::Named(s) => s.parse(),
        }
    }
}

impl From<FeatureScale> for ScaleRepr {
    fn from(f: FeatureScale) -> Self {
        match f {
            FeatureScale::Fixed(v) => ScaleRepr::Fixed(v),
            other => ScaleRepr::Named(other.to_string()),
        }
    }
}

impl std::str::FromStr for FeatureScale {
    type Err = GcgpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(FeatureScale::Auto),
            "inverse-dim" | "1/d" => Ok(FeatureScale::InverseDim),
            other => other.parse::<f64>().map(FeatureScale::Fixed).map_err(|_| {
                GcgpError::validation(format!(
                    "feature_scale must be auto, inverse-dim or a number, got `{other}`"
                ))
            }),
        }
    }
}

impl std::fmt::Display for FeatureScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureScale::Auto => f.write_str("auto"),
            FeatureScale::InverseDim => f.write_str("inverse-dim"),
            FeatureScale::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl FeatureScale {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FeatureScale::Fixed(v) if !(v > 0.0 && v.is_finite()) => Err(GcgpError::validation(
                format!("feature_scale must be positive and finite, got {v}"),
            )),
            _ => Ok(()),
        }
    }

    /// Multiplier for the given (already propagated) features.
    pub fn resolve(&self, features: &DMatrix<f64>) -> f64 {
        let inverse_dim = 1.0 / features.ncols().max(1) as f64;
        match *self {
            FeatureScale::Fixed(v) => v,
            FeatureScale::InverseDim => inverse_dim,
            FeatureScale::Auto => {
                let mean_sq = features.norm_squared() / features.nrows().max(1) as f64;
                if mean_sq > 0.0 && mean_sq.is_finite() {
                    1.0 / mean_sq
                } else {
                    inverse_dim
                }
            }
        }
    }
}

impl KernelConfig {
    /// Defaults for `d`-dimensional features: `sigma_w2 = 1`, `feature_scale = 1/d`.
    pub fn for_dim(d: usize, beta: f64, k: usize) -> Self {
        Self {
            k,
            beta,
            sigma_w2: 1.0,
            feature_scale: 1.0 / d.max(1) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("sigma_w2", self.sigma_w2),
            ("feature_scale", self.feature_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GcgpError::validation(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        crate::graph::PropagationConfig {
            k: self.k,
            row_normalize_features: false,
        }
        .validate()
    }

    fn inner_scale(&self) -> f64 {
        self.sigma_w2 * self.feature_scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    #[default]
    Arcsine,
    #[serde(alias = "dot")]
    DotProduct,
}

impl std::str::FromStr for KernelKind {
    type Err = GcgpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arcsine" => Ok(KernelKind::Arcsine),
            "dot" | "dot-product" => Ok(KernelKind::DotProduct),
            other => Err(GcgpError::validation(format!("unknown kernel `{other}`"))),
        }
    }
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelKind::Arcsine => "arcsine",
            KernelKind::DotProduct => "dot",
        })
    }
}

/// Arcsine kernel between two already-propagated feature rows.
pub fn arcsine_entry(xi: &[f64], xj: &[f64], cfg: &KernelConfig) -> Result<f64> {
    if xi.len() != xj.len() {
        return Err(GcgpError::shape("arcsine_entry", xi.len(), xj.len()));
    }
    if xi.iter().chain(xj).any(|v| v.is_nan()) {
        return Err(GcgpError::NonFinite {
            stage: "arcsine kernel input",
            step: None,
        });
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let c = cfg.inner_scale();
    let sij = c * dot(xi, xj) + cfg.beta;
    let sii = c * dot(xi, xi) + cfg.beta;
    let sjj = c * dot(xj, xj) + cfg.beta;
    let z = 2.0 * sij / ((1.0 + 2.0 * sii) * (1.0 + 2.0 * sjj)).sqrt();
    Ok(std::f64::consts::FRAC_2_PI * z.clamp(-ASIN_LIMIT, ASIN_LIMIT).asin())
}

/// Intermediate quantities of an arcsine kernel evaluation, kept for the
/// reverse pass.
#[derive(Debug, Clone)]
pub struct ArcsineParts {
    pub kernel: DMatrix<f64>,
    /// Asin arguments after clamping.
    pub z: DMatrix<f64>,
    /// `s(a_i, a_i)` for the rows of the left operand.
    pub left_self: Vec<f64>,
    /// `s(b_j, b_j)` for the rows of the right operand.
    pub right_self: Vec<f64>,
    /// Number of entries whose argument had to be clamped.
    pub clamped: usize,
}

fn self_terms(x: &DMatrix<f64>, cfg: &KernelConfig) -> Vec<f64> {
    let c = cfg.inner_scale();
    (0..x.nrows())
        .map(|i| c * x.row(i).norm_squared() + cfg.beta)
        .collect()
}

/// Arcsine kernel matrix between the rows of `left` (n×d) and `right` (m×d).
pub fn arcsine_parts(
    left: &DMatrix<f64>,
    right: &DMatrix<f64>,
    cfg: &KernelConfig,
) -> Result<ArcsineParts> {
    if left.ncols() != right.ncols() {
        return Err(GcgpError::shape(
            "arcsine kernel feature dimension",
            left.ncols(),
            right.ncols(),
        ));
    }
    if left.iter().chain(right.iter()).any(|v| !v.is_finite()) {
        return Err(GcgpError::NonFinite {
            stage: "arcsine kernel input",
            step: None,
        });
    }
    let left_self = self_terms(left, cfg);
    let right_self = self_terms(right, cfg);
    let mut z = left * right.transpose();
    let c = cfg.inner_scale();
    let beta = cfg.beta;
    let n = left.nrows();
    let left_root: Vec<f64> = left_self.iter().map(|s| (1.0 + 2.0 * s).sqrt()).collect();
    let clamped: usize = z
        .as_mut_slice()
        .par_chunks_mut(n.max(1))
        .enumerate()
        .map(|(j, col)| {
            let right_root = (1.0 + 2.0 * right_self[j]).sqrt();
            let mut hits = 0;
            for (i, v) in col.iter_mut().enumerate() {
                let raw = 2.0 * (c * *v + beta) / (left_root[i] * right_root);
                if raw.abs() > ASIN_LIMIT {
                    hits += 1;
                }
                *v = raw.clamp(-ASIN_LIMIT, ASIN_LIMIT);
            }
            hits
        })
        .sum();
    if clamped > 0 {
        log::debug!("arcsine kernel clamped {clamped} asin arguments");
    }
    let kernel = z.map(|v| std::f64::consts::FRAC_2_PI * v.asin());
    Ok(ArcsineParts {
        kernel,
        z,
        left_self,
        right_self,
        clamped,
    })
}

/// `feature_scale · (a_i · b_j)` on propagated rows.
pub fn dot_product_kernel(
    left: &DMatrix<f64>,
    right: &DMatrix<f64>,
    cfg: &KernelConfig,
) -> Result<DMatrix<f64>> {
    if left.ncols() != right.ncols() {
        return Err(GcgpError::shape(
            "dot-product kernel feature dimension",
            left.ncols(),
            right.ncols(),
        ));
    }
    Ok(left * right.transpose() * cfg.feature_scale)
}

/// Kernel matrix between two sets of propagated rows.
pub fn kernel_matrix(
    kind: KernelKind,
    left: &DMatrix<f64>,
    right: &DMatrix<f64>,
    cfg: &KernelConfig,
) -> Result<DMatrix<f64>> {
    match kind {
        KernelKind::Arcsine => Ok(arcsine_parts(left, right, cfg)?.kernel),
        KernelKind::DotProduct => dot_product_kernel(left, right, cfg),
    }
}

/// Structure attached to a feature matrix for propagation.
#[derive(Debug, Clone, Copy)]
pub enum Structure<'a> {
    /// No edges: the normalized self-looped adjacency is the identity.
    Identity,
    /// Already-normalized dense adjacency.
    Dense(&'a DMatrix<f64>),
    Sparse(&'a NormalizedAdjacency),
}

/// A feature matrix together with its normalized adjacency.
#[derive(Debug, Clone, Copy)]
pub struct GraphInput<'a> {
    pub features: &'a DMatrix<f64>,
    pub structure: Structure<'a>,
}

impl<'a> GraphInput<'a> {
    pub fn new(features: &'a DMatrix<f64>, structure: Structure<'a>) -> Self {
        Self {
            features,
            structure,
        }
    }

    pub fn propagated(&self, k: usize) -> Result<DMatrix<f64>> {
        match self.structure {
            Structure::Identity => Ok(self.features.clone()),
            Structure::Dense(a) => propagate(a, self.features, k),
            Structure::Sparse(a) => propagate(a, self.features, k),
        }
    }
}

/// `K(G, G^S)`: propagate both graphs with their own adjacency, then apply
/// the kernel row by row.
pub fn cross_covariance(
    kind: KernelKind,
    target: &GraphInput<'_>,
    condensed: &GraphInput<'_>,
    cfg: &KernelConfig,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let left = target.propagated(cfg.k)?;
    let right = condensed.propagated(cfg.k)?;
    kernel_matrix(kind, &left, &right, cfg)
}

/// `K(G^S, G^S)`.
pub fn self_covariance(
    kind: KernelKind,
    condensed: &GraphInput<'_>,
    cfg: &KernelConfig,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let x = condensed.propagated(cfg.k)?;
    let mut k = kernel_matrix(kind, &x, &x, cfg)?;
    // the Gram product is symmetric up to rounding; make it exact
    let m = k.nrows();
    for i in 0..m {
        for j in (i + 1)..m {
            let v = 0.5 * (k[(i, j)] + k[(j, i)]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::normalize_adjacency;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn feature_scale_resolution() {
        let x = DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        // mean squared norm (2 + 4) / 2 = 3
        assert_eq!(FeatureScale::Auto.resolve(&x), 1.0 / 3.0);
        assert_eq!(FeatureScale::InverseDim.resolve(&x), 0.25);
        assert_eq!(FeatureScale::Fixed(2.0).resolve(&x), 2.0);
        assert_eq!(FeatureScale::Auto.resolve(&DMatrix::zeros(3, 5)), 0.2);
        assert!(FeatureScale::Fixed(0.0).validate().is_err());

        for (text, want) in [("auto", FeatureScale::Auto), ("1/d", FeatureScale::InverseDim), ("0.5", FeatureScale::Fixed(0.5))] {
            let got: FeatureScale = text.parse().unwrap();
            assert_eq!(got, want);
            let json = serde_json::to_string(&got).unwrap();
            assert_eq!(serde_json::from_str::<FeatureScale>(&json).unwrap(), want);
        }
        assert!("big".parse::<FeatureScale>().is_err());
    }

    fn cfg(beta: f64) -> KernelConfig {
        KernelConfig {
            k: 1,
            beta,
            sigma_w2: 1.0,
            feature_scale: 1.0,
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_features_give_one_third() {
        let v = arcsine_entry(&[0.0; 4], &[0.0; 4], &cfg(0.5)).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn vanishing_beta_gives_zero() {
        let v = arcsine_entry(&[0.0; 3], &[0.0; 3], &cfg(1e-300)).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn nan_input_is_an_error() {
        assert!(arcsine_entry(&[f64::NAN], &[0.0], &cfg(0.5)).is_err());
        assert!(arcsine_entry(&[1.0, 2.0], &[0.0], &cfg(0.5)).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(0.5);
        assert!(c.validate().is_ok());
        c.beta = 0.0;
        assert!(c.validate().is_err());
        c.beta = 0.5;
        c.feature_scale = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn cross_equals_self_when_graphs_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 5, 3);
        let a = DMatrix::from_row_slice(
            5,
            5,
            &[
                0., 1., 0., 0., 1., 1., 0., 1., 0., 0., 0., 1., 0., 1., 0., 0., 0., 1., 0., 1.,
                1., 0., 0., 1., 0.,
            ],
        );
        let a_hat = normalize_adjacency(&a).unwrap();
        let g = GraphInput::new(&x, Structure::Dense(&a_hat));
        let c = KernelConfig::for_dim(3, 0.3, 2);
        let cross = cross_covariance(KernelKind::Arcsine, &g, &g, &c).unwrap();
        let own = self_covariance(KernelKind::Arcsine, &g, &c).unwrap();
        assert!((cross - own).amax() < 1e-14);
    }

    #[test]
    fn single_zero_condensed_node() {
        let target = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.5, 0.0, 0.0]);
        let cond = DMatrix::zeros(1, 2);
        let c = KernelConfig::for_dim(2, 0.5, 0);
        let k = cross_covariance(
            KernelKind::Arcsine,
            &GraphInput::new(&target, Structure::Identity),
            &GraphInput::new(&cond, Structure::Identity),
            &c,
        )
        .unwrap();
        assert!((k[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((k[(2, 0)] - 1.0 / 3.0).abs() < 1e-15);
        let own =
            self_covariance(KernelKind::Arcsine, &GraphInput::new(&cond, Structure::Identity), &c)
                .unwrap();
        assert!((own[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn toy_cross_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 6, 4);
        let xs = random(&mut rng, 2, 4);
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)];
        let adj = crate::graph::SparseAdjacency::from_edges(6, &edges).unwrap();
        let a_hat = adj.normalized();
        let a_s = normalize_adjacency(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let c = KernelConfig::for_dim(4, 0.2, 2);
        let got = cross_covariance(
            KernelKind::Arcsine,
            &GraphInput::new(&x, Structure::Sparse(&a_hat)),
            &GraphInput::new(&xs, Structure::Dense(&a_s)),
            &c,
        )
        .unwrap();

        // naive oracle: dense propagation, scalar double loop
        let ad = a_hat.to_dense();
        let px = &ad * &ad * &x;
        let pxs = &a_s * &a_s * &xs;
        for i in 0..6 {
            for j in 0..2 {
                let (mut sij, mut sii, mut sjj) = (0.0, 0.0, 0.0);
                for t in 0..4 {
                    sij += px[(i, t)] * pxs[(j, t)];
                    sii += px[(i, t)] * px[(i, t)];
                    sjj += pxs[(j, t)] * pxs[(j, t)];
                }
                let s = |v: f64| v / 4.0 + 0.2;
                let arg = 2.0 * s(sij) / ((1.0 + 2.0 * s(sii)) * (1.0 + 2.0 * s(sjj))).sqrt();
                let want = 2.0 / std::f64::consts::PI * arg.asin();
                assert!((got[(i, j)] - want).abs() < 1e-14, "({i},{j})");
            }
        }
    }

    #[test]
    fn dot_product_cases() {
        let c = cfg(0.5);
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        assert_eq!(dot_product_kernel(&a, &b, &c).unwrap()[(0, 0)], 0.0);
        assert_eq!(dot_product_kernel(&a, &a, &c).unwrap()[(0, 0)], 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = random(&mut rng, 4, 3);
        let r = random(&mut rng, 2, 3);
        let c = KernelConfig::for_dim(3, 0.5, 0);
        let k = dot_product_kernel(&l, &r, &c).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let mut s = 0.0;
                for t in 0..3 {
                    s += l[(i, t)] * r[(j, t)];
                }
                assert!((k[(i, j)] - s / 3.0).abs() < 1e-15);
            }
        }
        assert!(dot_product_kernel(&l, &DMatrix::zeros(1, 2), &c).is_err());
    }

    #[test]
    fn self_covariance_is_exactly_symmetric_and_factorizable() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(&mut rng, 8, 5) * 3.0;
        let c = KernelConfig::for_dim(5, 0.1, 0);
        let k = self_covariance(KernelKind::Arcsine, &GraphInput::new(&x, Structure::Identity), &c)
            .unwrap();
        assert_eq!(k, k.transpose());
        let shifted = &k + DMatrix::identity(8, 8) * c.beta;
        assert!(shifted.cholesky().is_some());
    }

    #[test]
    fn clamp_is_counted() {
        // huge identical rows push the argument to the rounding boundary
        let x = DMatrix::from_element(2, 1, 1e9);
        let c = cfg(1e-300);
        let parts = arcsine_parts(&x, &x, &c).unwrap();
        assert!(parts.kernel.iter().all(|v| v.is_finite() && v.abs() < 1.0));
        assert!(parts.z.iter().all(|v| v.abs() <= ASIN_LIMIT));
    }
}
