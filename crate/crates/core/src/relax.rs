//! Binary-concrete relaxation of the condensed adjacency.
//!
//! Edge logits are stored as `log α`. A relaxed sample is
//! `sigmoid((log α_ij + L_ij) / τ)` with logistic noise `L = log U − log(1−U)`,
//! drawn for the upper triangle and mirrored. The diagonal is zero; the
//! self-loop is added later by normalization.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GcgpError, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `α / (1 + α)`: probability that an entry is 1 in the zero-temperature limit.
pub fn limit_probability(alpha: f64) -> f64 {
    alpha / (1.0 + alpha)
}

/// Logistic noise from a uniform draw.
pub fn logistic_from_uniform(u: f64) -> f64 {
    u.ln() - (1.0 - u).ln()
}

/// Symmetric logistic noise with zero diagonal.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, m: usize) -> DMatrix<f64> {
    let mut noise = DMatrix::zeros(m, m);
    for j in 0..m {
        for i in 0..j {
            // open interval: reject the (measure-zero) endpoints
            let mut u: f64 = rng.random();
            while u <= 0.0 || u >= 1.0 {
                u = rng.random();
            }
            let l = logistic_from_uniform(u);
            noise[(i, j)] = l;
            noise[(j, i)] = l;
        }
    }
    noise
}

/// Edge logit of pair `(i, j)`: the mean of the two stored `log α` entries,
/// so a symmetric parameter matrix stays symmetric under elementwise updates.
pub fn pair_logit(log_alpha: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    0.5 * (log_alpha[(i, j)] + log_alpha[(j, i)])
}

/// Relaxed adjacency for fixed noise.
pub fn relaxed_adjacency(
    log_alpha: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    tau: f64,
) -> Result<DMatrix<f64>> {
    if !(tau > 0.0) {
        return Err(GcgpError::validation(format!("temperature must be positive, got {tau}")));
    }
    if log_alpha.shape() != noise.shape() || !log_alpha.is_square() {
        return Err(GcgpError::shape(
            "relaxed adjacency",
            format!("{:?}", log_alpha.shape()),
            format!("{:?}", noise.shape()),
        ));
    }
    let m = log_alpha.nrows();
    let mut a = DMatrix::zeros(m, m);
    for j in 0..m {
        for i in 0..j {
            let v = sigmoid((pair_logit(log_alpha, i, j) + noise[(i, j)]) / tau);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    Ok(a)
}

/// Binary adjacency: `A_ij = 1` iff `α_ij / (1 + α_ij) > 0.5`, i.e. `log α_ij > 0`.
pub fn discretize(log_alpha: &DMatrix<f64>) -> DMatrix<f64> {
    let m = log_alpha.nrows();
    DMatrix::from_fn(m, m, |i, j| {
        if i != j && limit_probability(pair_logit(log_alpha, i, j).exp()) > 0.5 {
            1.0
        } else {
            0.0
        }
    })
}

/// Learnable structure state of a condensed graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedStructure {
    pub log_alpha: DMatrix<f64>,
    pub tau: f64,
    pub learn_structure: bool,
    /// Seed of the noise stream driving the samples.
    pub rng_stream: u64,
}

impl RelaxedStructure {
    /// Structure-free state: the normalized adjacency is the identity.
    pub fn disabled(m: usize, seed: u64) -> Self {
        Self {
            log_alpha: DMatrix::zeros(m, m),
            tau: 1.0,
            learn_structure: false,
            rng_stream: seed,
        }
    }

    /// `log α ~ Normal(0, std²)`, symmetric, zero diagonal.
    pub fn random<R: Rng + ?Sized>(m: usize, std: f64, tau: f64, seed: u64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut log_alpha = DMatrix::zeros(m, m);
        for j in 0..m {
            for i in 0..j {
                let v = normal.sample(rng);
                log_alpha[(i, j)] = v;
                log_alpha[(j, i)] = v;
            }
        }
        Self {
            log_alpha,
            tau,
            learn_structure: true,
            rng_stream: seed,
        }
    }

    pub fn m(&self) -> usize {
        self.log_alpha.nrows()
    }

    /// Fresh relaxed sample.
    pub fn sample_adjacency<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DMatrix<f64>> {
        if !self.learn_structure {
            return Err(GcgpError::validation(
                "sampling requested for a condensed graph without learned structure",
            ));
        }
        let noise = sample_noise(rng, self.m());
        relaxed_adjacency(&self.log_alpha, &noise, self.tau)
    }

    /// Binary adjacency, all zeros when structure is not learned.
    pub fn discretize(&self) -> DMatrix<f64> {
        if self.learn_structure {
            discretize(&self.log_alpha)
        } else {
            DMatrix::zeros(self.m(), self.m())
        }
    }
}

/// Geometric temperature schedule `τ_t = τ₀ (τ_end / τ₀)^{t/T}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSchedule {
    pub tau0: f64,
    pub tau_end: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self {
            tau0: 1.0,
            tau_end: 0.05,
        }
    }
}

impl TauSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_end > 0.0) || !(self.tau_end < self.tau0) {
            return Err(GcgpError::validation(format!(
                "tau schedule needs 0 < tau_end < tau0, got tau0={} tau_end={}",
                self.tau0, self.tau_end
            )));
        }
        Ok(())
    }

    pub fn at(&self, step: usize, total: usize) -> Result<f64> {
        self.validate()?;
        if step > total {
            return Err(GcgpError::validation(format!(
                "anneal step {step} beyond total {total}"
            )));
        }
        if total == 0 {
            return Ok(self.tau0);
        }
        let frac = step as f64 / total as f64;
        Ok(self.tau0 * (self.tau_end / self.tau0).powf(frac))
    }
}
