//! Monte-Carlo estimate of the arcsine kernel from random finite-width erf
//! networks, used as an independent check of the closed form.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::{arcsine_entry, KernelConfig};
use crate::error::{GcgpError, Result};

const CHUNKS: u64 = 64;

/// `E[erf(wᵀx + b) erf(wᵀy + b)]` for each requested row pair of `points`,
/// with `w ~ N(0, sigma_w2 · feature_scale · I)` and `b ~ N(0, beta)`.
/// Samples are drawn in a fixed number of seeded chunks, so the estimate
/// does not depend on the thread count.
pub fn erf_network_expectation(
    points: &DMatrix<f64>,
    pairs: &[(usize, usize)],
    cfg: &KernelConfig,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if samples == 0 {
        return Err(GcgpError::validation("sample count must be positive"));
    }
    let (p, d) = points.shape();
    if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a >= p || b >= p) {
        return Err(GcgpError::validation(format!("pair ({a}, {b}) outside {p} points")));
    }
    let w_std = (cfg.sigma_w2 * cfg.feature_scale).sqrt();
    let b_std = cfg.beta.sqrt();
    let rows: Vec<Vec<f64>> = (0..p).map(|i| points.row(i).iter().copied().collect()).collect();
    let chunk = |c: u64| -> Vec<f64> {
        let count = samples as u64 / CHUNKS + u64::from(c < samples as u64 % CHUNKS);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c);
        let mut acc = vec![0.0; pairs.len()];
        let mut w = vec![0.0; d];
        let mut act = vec![0.0; p];
        for _ in 0..count {
            for wi in w.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *wi = w_std * z;
            }
            let z: f64 = StandardNormal.sample(&mut rng);
            let b = b_std * z;
            for (a, row) in act.iter_mut().zip(&rows) {
                let pre: f64 = row.iter().zip(&w).map(|(x, wj)| x * wj).sum::<f64>() + b;
                *a = libm::erf(pre);
            }
            for (s, &(i, j)) in acc.iter_mut().zip(pairs) {
                *s += act[i] * act[j];
            }
        }
        acc
    };
    let sums = (0..CHUNKS).into_par_iter().map(chunk).reduce(
        || vec![0.0; pairs.len()],
        |mut a, b| {
            a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
            a
        },
    );
    Ok(sums.into_iter().map(|s| s / samples as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub dims: usize,
    pub pairs: usize,
    pub samples: usize,
    pub betas: Vec<f64>,
    /// Largest |analytic − Monte-Carlo| over all pairs and betas.
    pub max_abs_deviation: f64,
}

/// Compares the closed form against [`erf_network_expectation`] on `pairs`
/// random pairs with standard normal entries, for each beta.
pub fn kernel_oracle(
    dims: usize,
    pairs: usize,
    samples: usize,
    betas: &[f64],
    seed: u64,
) -> Result<OracleReport> {
    if dims == 0 || pairs == 0 {
        return Err(GcgpError::validation("dims and pairs must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = DMatrix::from_fn(2 * pairs, dims, |_, _| StandardNormal.sample(&mut rng));
    let index: Vec<(usize, usize)> = (0..pairs).map(|p| (2 * p, 2 * p + 1)).collect();
    let mut worst: f64 = 0.0;
    for (bi, &beta) in betas.iter().enumerate() {
        let cfg = KernelConfig::for_dim(dims, beta, 0);
        let mc = erf_network_expectation(&points, &index, &cfg, samples, seed.wrapping_add(1 + bi as u64))?;
        for (&(a, b), est) in index.iter().zip(&mc) {
            let xa: Vec<f64> = points.row(a).iter().copied().collect();
            let xb: Vec<f64> = points.row(b).iter().copied().collect();
            let exact = arcsine_entry(&xa, &xb, &cfg)?;
            worst = worst.max((exact - est).abs());
        }
    }
    Ok(OracleReport {
        dims,
        pairs,
        samples,
        betas: betas.to_vec(),
        max_abs_deviation: worst,
    })
}
