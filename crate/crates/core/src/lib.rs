//! Graph condensation by matching a Gaussian-process posterior.
//!
//! A small synthetic graph `(X_s, Y_s, A_s)` is optimized so that the GP
//! posterior mean it induces over the original graph reproduces the original
//! labels. Covariances come from an arcsine kernel on k-hop propagated
//! features; the synthetic adjacency is relaxed with a binary concrete
//! distribution so that it can be learned by gradient descent.

pub mod condense;
pub mod covariance;
pub mod error;
pub mod eval;
pub mod gp;
pub mod grad;
pub mod graph;
pub mod io;
pub mod oracle;
pub mod reference;
pub mod relax;
pub mod synthetic;

pub use condense::{condense, CondenseConfig, CondenseReport, CondensedGraph, PreparedGraph};
pub use covariance::{FeatureScale, KernelConfig, KernelKind};
pub use error::{GcgpError, Result};
pub use graph::{Graph, PropagationConfig, SparseAdjacency, Splits};
