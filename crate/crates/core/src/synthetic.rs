//! Synthetic graphs for tests, gradient checks and timing runs.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Graph, SparseAdjacency, Splits};

/// Two disjoint cliques of `size` nodes with opposite 2-d features.
/// The first half of each clique is training data, the rest is test data.
pub fn two_cliques(size: usize) -> Graph {
    let n = 2 * size;
    let mut edges = Vec::new();
    for block in 0..2 {
        let base = block * size;
        for i in 0..size {
            for j in (i + 1)..size {
                edges.push((base + i, base + j));
            }
        }
    }
    let features = DMatrix::from_fn(n, 2, |i, c| {
        let sign = if i < size { 1.0 } else { -1.0 };
        let jiggle = 0.1 * ((i % size) % 3) as f64;
        if c == 0 {
            sign
        } else {
            sign * (0.5 + jiggle)
        }
    });
    let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= size)).collect();
    let half = size.div_ceil(2);
    let mut splits = Splits::default();
    for block in 0..2 {
        let base = block * size;
        splits.train.extend(base..base + half);
        splits.test.extend(base + half..base + size);
    }
    let adjacency = SparseAdjacency::from_edges(n, &edges).expect("valid clique edges");
    Graph::new(features, adjacency, labels, 2, splits).expect("valid toy graph")
}

/// Parameters of a citation-like contextual stochastic block model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockModel {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    pub avg_degree: f64,
    /// Probability that an edge stays inside a class.
    pub homophily: f64,
    /// Active binary words per node.
    pub words_per_node: usize,
    /// Probability that a word comes from the node's class vocabulary.
    pub signal: f64,
    pub train_per_class: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for BlockModel {
    fn default() -> Self {
        Self {
            n: 1000,
            d: 200,
            classes: 4,
            avg_degree: 4.0,
            homophily: 0.8,
            words_per_node: 12,
            signal: 0.3,
            train_per_class: 20,
            val: 200,
            test: 400,
            seed: 0,
        }
    }
}

impl BlockModel {
    pub fn generate(&self) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let labels: Vec<usize> = (0..self.n).map(|i| i % self.classes).collect();
        let by_class: Vec<Vec<usize>> = (0..self.classes)
            .map(|c| (0..self.n).filter(|&i| labels[i] == c).collect())
            .collect();

        let topic = self.d / self.classes;
        let mut features = DMatrix::zeros(self.n, self.d);
        for i in 0..self.n {
            let c = labels[i];
            for _ in 0..self.words_per_node {
                let w = if rng.random::<f64>() < self.signal && topic > 0 {
                    c * topic + rng.random_range(0..topic)
                } else {
                    rng.random_range(0..self.d)
                };
                features[(i, w)] = 1.0;
            }
        }

        let target_edges = (self.n as f64 * self.avg_degree / 2.0).round() as usize;
        let mut edges = Vec::with_capacity(target_edges);
        while edges.len() < target_edges {
            let u = rng.random_range(0..self.n);
            let v = if rng.random::<f64>() < self.homophily {
                let pool = &by_class[labels[u]];
                pool[rng.random_range(0..pool.len())]
            } else {
                rng.random_range(0..self.n)
            };
            if u != v {
                edges.push((u, v));
            }
        }
        let adjacency = SparseAdjacency::from_edges(self.n, &edges).expect("generated edges in range");

        let mut order: Vec<usize> = (0..self.n).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut splits = Splits::default();
        let mut taken = vec![0; self.classes];
        let mut rest = Vec::new();
        for &i in &order {
            if taken[labels[i]] < self.train_per_class {
                taken[labels[i]] += 1;
                splits.train.push(i);
            } else {
                rest.push(i);
            }
        }
        let val_end = self.val.min(rest.len());
        splits.val = rest[..val_end].to_vec();
        let test_end = (val_end + self.test).min(rest.len());
        splits.test = rest[val_end..test_end].to_vec();
        Graph::new(features, adjacency, labels, self.classes, splits).expect("valid block model")
    }
}

/// Erdős–Rényi graph with Gaussian features and uniform labels; every node
/// is a training node. Used for gradient checks and timing.
pub fn random_graph(n: usize, d: usize, classes: usize, edge_prob: f64, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < edge_prob {
                edges.push((i, j));
            }
        }
    }
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let splits = Splits {
        train: (0..n).collect(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let adjacency = SparseAdjacency::from_edges(n, &edges).expect("edges in range");
    Graph::new(features, adjacency, labels, classes, splits).expect("valid random graph")
}

/// Sparse random graph with about `avg_degree` neighbours per node, for
/// sizes where the dense edge loop of [`random_graph`] is too slow.
pub fn sparse_random_graph(n: usize, d: usize, classes: usize, avg_degree: f64, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
    let target = (n as f64 * avg_degree / 2.0).round() as usize;
    let mut edges = Vec::with_capacity(target);
    while edges.len() < target {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u != v {
            edges.push((u, v));
        }
    }
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let splits = Splits {
        train: (0..n).collect(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let adjacency = SparseAdjacency::from_edges(n, &edges).expect("edges in range");
    Graph::new(features, adjacency, labels, classes, splits).expect("valid random graph")
}

/// Random gradient-check instance: `n` target rows with Gaussian features
/// and cyclic one-hot labels, and an `m`-node condensed graph with Gaussian
/// features and labels. With `learn_structure` the structure parameters are
/// random and a noise draw is returned.
pub fn gradient_instance(
    n: usize,
    m: usize,
    d: usize,
    classes: usize,
    learn_structure: bool,
    kind: crate::covariance::KernelKind,
    seed: u64,
) -> crate::error::Result<(crate::grad::Objective, crate::condense::CondensedGraph, Option<DMatrix<f64>>)> {
    use crate::relax::{sample_noise, RelaxedStructure};
    if classes == 0 || n == 0 || m == 0 || d == 0 {
        return Err(crate::error::GcgpError::validation("instance sizes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
    let y = DMatrix::from_fn(n, classes, |i, j| if i % classes == j { 1.0 } else { 0.0 });
    let cfg = crate::covariance::KernelConfig::for_dim(d, 0.5, 2);
    let obj = crate::grad::Objective::new(x, y, kind, cfg)?;
    let structure = if learn_structure {
        RelaxedStructure::random(m, 0.5, 0.5, seed, &mut rng)
    } else {
        RelaxedStructure::disabled(m, seed)
    };
    let xs = DMatrix::from_fn(m, d, |_, _| StandardNormal.sample(&mut rng));
    let ys = DMatrix::from_fn(m, classes, |_, _| StandardNormal.sample(&mut rng));
    let noise = learn_structure.then(|| sample_noise(&mut rng, m));
    Ok((obj, crate::condense::CondensedGraph::new(xs, ys, structure), noise))
}
