//! Graph datasets, symmetric normalization and k-hop propagation.
//!
//! The original graph keeps its adjacency in a compressed sparse row layout;
//! condensed graphs are small and use dense matrices throughout.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GcgpError, Result};

/// Upper bound on the hop count accepted by [`PropagationConfig`].
pub const MAX_HOPS: usize = 16;

/// Symmetric binary adjacency in CSR form, without self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl SparseAdjacency {
    /// Builds the adjacency from undirected edges. Each pair may appear in
    /// either orientation; duplicates collapse.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbours: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(GcgpError::validation(format!(
                    "edge ({u},{v}) references a node outside [0,{n})"
                )));
            }
            if u == v {
                return Err(GcgpError::validation(format!(
                    "self-loop ({u},{u}) in edge list; self-loops are added by normalization"
                )));
            }
            neighbours[u].push(v);
            neighbours[v].push(u);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for row in &mut neighbours {
            row.sort_unstable();
            row.dedup();
            col_idx.extend_from_slice(row);
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
        })
    }

    /// Validates a dense 0/1 matrix and converts it.
    pub fn from_dense(a: &DMatrix<f64>) -> Result<Self> {
        validate_dense_adjacency(a, true)?;
        let n = a.nrows();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if a[(i, j)] != 0.0 {
                    edges.push((i, j));
                }
            }
        }
        Self::from_edges(n, &edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.col_idx.len() / 2
    }

    pub fn neighbours(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for u in 0..self.n {
            for &v in self.neighbours(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Edges among `nodes`, re-indexed by position in `nodes`.
    pub fn induced(&self, nodes: &[usize]) -> DMatrix<f64> {
        let m = nodes.len();
        let mut a = DMatrix::zeros(m, m);
        for (pi, &u) in nodes.iter().enumerate() {
            let nb = self.neighbours(u);
            for (pj, &v) in nodes.iter().enumerate() {
                if pi != pj && nb.binary_search(&v).is_ok() {
                    a[(pi, pj)] = 1.0;
                }
            }
        }
        a
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for u in 0..self.n {
            for &v in self.neighbours(u) {
                a[(u, v)] = 1.0;
            }
        }
        a
    }

    /// `D̃^{-1/2} (A + I) D̃^{-1/2}` in sparse form.
    pub fn normalized(&self) -> NormalizedAdjacency {
        let inv_sqrt: Vec<f64> = (0..self.n)
            .map(|i| 1.0 / ((self.neighbours(i).len() + 1) as f64).sqrt())
            .collect();
        let mut row_ptr = Vec::with_capacity(self.n + 1);
        let mut col_idx = Vec::with_capacity(self.col_idx.len() + self.n);
        let mut values = Vec::with_capacity(self.col_idx.len() + self.n);
        row_ptr.push(0);
        for i in 0..self.n {
            let nb = self.neighbours(i);
            let split = nb.partition_point(|&j| j < i);
            let cols = nb[..split]
                .iter()
                .copied()
                .chain(std::iter::once(i))
                .chain(nb[split..].iter().copied());
            for j in cols {
                col_idx.push(j);
                values.push(inv_sqrt[i] * inv_sqrt[j]);
            }
            row_ptr.push(col_idx.len());
        }
        NormalizedAdjacency {
            n: self.n,
            row_ptr,
            col_idx,
            values,
        }
    }
}

/// Sparse symmetric-normalized self-looped adjacency.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[(i, self.col_idx[p])] = self.values[p];
            }
        }
        out
    }
}

/// Left multiplication by a square operator, used for k-hop propagation.
pub trait Propagator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
}

impl Propagator for NormalizedAdjacency {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let d = x.ncols();
        let mut out = DMatrix::zeros(self.n, d);
        // column-major storage: walk columns outermost so both reads and
        // writes stay contiguous
        for c in 0..d {
            let src = x.column(c);
            let mut dst = out.column_mut(c);
            for i in 0..self.n {
                let mut acc = 0.0;
                for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                    acc += self.values[p] * src[self.col_idx[p]];
                }
                dst[i] = acc;
            }
        }
        out
    }
}

impl Propagator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self * x
    }
}

fn validate_dense_adjacency(a: &DMatrix<f64>, binary: bool) -> Result<()> {
    if !a.is_square() {
        return Err(GcgpError::shape(
            "adjacency",
            "square matrix",
            format!("{}x{}", a.nrows(), a.ncols()),
        ));
    }
    let n = a.nrows();
    for i in 0..n {
        for j in 0..n {
            let v = a[(i, j)];
            if !v.is_finite() || v < 0.0 {
                return Err(GcgpError::validation(format!(
                    "adjacency entry ({i},{j}) = {v} is negative or non-finite"
                )));
            }
            if binary && v != 0.0 && v != 1.0 {
                return Err(GcgpError::validation(format!(
                    "adjacency entry ({i},{j}) = {v} is not binary"
                )));
            }
            if j > i && (v - a[(j, i)]).abs() > 1e-12 {
                return Err(GcgpError::validation(format!(
                    "adjacency is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

/// Dense `D̃^{-1/2}(A + I)D̃^{-1/2}`.
///
/// Accepts relaxed (real, non-negative) entries as well as binary ones; the
/// diagonal of `a` is used as given, so callers pass a zero diagonal.
pub fn normalize_adjacency(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    validate_dense_adjacency(a, false)?;
    let n = a.nrows();
    let mut tilde = a.clone();
    for i in 0..n {
        tilde[(i, i)] += 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / tilde.row(i).sum().sqrt()).collect();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        tilde[(i, j)] * inv_sqrt[i] * inv_sqrt[j]
    }))
}

/// `Â^k X` by `k` successive applications of the operator.
pub fn propagate<P: Propagator + ?Sized>(
    a_hat: &P,
    x: &DMatrix<f64>,
    k: usize,
) -> Result<DMatrix<f64>> {
    if a_hat.dim() != x.nrows() {
        return Err(GcgpError::shape(
            "propagate",
            format!("{} feature rows", a_hat.dim()),
            x.nrows(),
        ));
    }
    let mut out = x.clone();
    for _ in 0..k {
        out = a_hat.apply(&out);
    }
    Ok(out)
}

/// Scales every non-zero row to unit L1 norm.
pub fn row_normalize(x: &mut DMatrix<f64>) {
    for i in 0..x.nrows() {
        let s: f64 = x.row(i).iter().map(|v| v.abs()).sum();
        if s > 0.0 {
            x.row_mut(i).scale_mut(1.0 / s);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub k: usize,
    pub row_normalize_features: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            k: 2,
            row_normalize_features: true,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k > MAX_HOPS {
            return Err(GcgpError::validation(format!(
                "hop count {} exceeds the limit of {MAX_HOPS}",
                self.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// A node-classification dataset. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Graph {
    features: DMatrix<f64>,
    adjacency: SparseAdjacency,
    labels: Vec<usize>,
    num_classes: usize,
    splits: Splits,
}

impl Graph {
    pub fn new(
        features: DMatrix<f64>,
        adjacency: SparseAdjacency,
        labels: Vec<usize>,
        num_classes: usize,
        splits: Splits,
    ) -> Result<Self> {
        let n = features.nrows();
        if adjacency.num_nodes() != n {
            return Err(GcgpError::shape(
                "graph adjacency",
                format!("{n} nodes"),
                adjacency.num_nodes(),
            ));
        }
        if labels.len() != n {
            return Err(GcgpError::shape("graph labels", n, labels.len()));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(GcgpError::validation(format!(
                "label {l} of node {i} is outside [0,{num_classes})"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(GcgpError::validation("features contain non-finite values"));
        }
        let mut seen = HashSet::new();
        for (name, set) in [
            ("train", &splits.train),
            ("val", &splits.val),
            ("test", &splits.test),
        ] {
            for &i in set {
                if i >= n {
                    return Err(GcgpError::validation(format!(
                        "{name} split index {i} is outside [0,{n})"
                    )));
                }
                if !seen.insert(i) {
                    return Err(GcgpError::validation(format!(
                        "node {i} appears in more than one split position ({name})"
                    )));
                }
            }
        }
        Ok(Self {
            features,
            adjacency,
            labels,
            num_classes,
            splits,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn adjacency(&self) -> &SparseAdjacency {
        &self.adjacency
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    /// Features after optional row normalization and `k` propagation hops
    /// over the full graph.
    pub fn propagated_features(&self, cfg: &PropagationConfig) -> Result<DMatrix<f64>> {
        cfg.validate()?;
        let a_hat = self.adjacency.normalized();
        if cfg.row_normalize_features {
            let mut x = self.features.clone();
            row_normalize(&mut x);
            propagate(&a_hat, &x, cfg.k)
        } else {
            propagate(&a_hat, &self.features, cfg.k)
        }
    }

    /// Training-split indices grouped by class.
    pub fn train_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for &i in &self.splits.train {
            out[self.labels[i]].push(i);
        }
        out
    }

    /// One-hot labels for `rows`, as a `rows.len() × C` matrix.
    pub fn one_hot(&self, rows: &[usize]) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(rows.len(), self.num_classes);
        for (r, &i) in rows.iter().enumerate() {
            y[(r, self.labels[i])] = 1.0;
        }
        y
    }

    /// Reads a dataset directory (`features.csv`, `edges.csv`, `labels.csv`,
    /// `split.json`).
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(GcgpError::validation(format!(
                "dataset directory {} does not exist",
                dir.display()
            )));
        }
        let features = read_features(&dir.join("features.csv"))?;
        let n = features.nrows();
        let labels = read_labels(&dir.join("labels.csv"))?;
        if labels.len() != n {
            return Err(GcgpError::validation(format!(
                "labels.csv has {} rows but features.csv has {n}",
                labels.len()
            )));
        }
        let edges = read_edges(&dir.join("edges.csv"))?;
        let adjacency = SparseAdjacency::from_edges(n, &edges)?;
        let split_path = dir.join("split.json");
        let splits: Splits = serde_json::from_str(&read_to_string(&split_path)?)?;
        let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
        Self::new(features, adjacency, labels, num_classes, splits)
    }

    /// Writes the dataset in the directory format accepted by [`Graph::load`].
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

        let mut buf = String::new();
        for row in self.features.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            buf.push_str(&cells.join(","));
            buf.push('\n');
        }
        write_file(&dir.join("features.csv"), &buf)?;

        let mut buf = String::new();
        for (u, v) in self.adjacency.edges() {
            buf.push_str(&format!("{u},{v}\n"));
        }
        write_file(&dir.join("edges.csv"), &buf)?;

        let mut buf = String::new();
        for l in &self.labels {
            buf.push_str(&format!("{l}\n"));
        }
        write_file(&dir.join("labels.csv"), &buf)?;

        write_file(
            &dir.join("split.json"),
            &serde_json::to_string(&self.splits)?,
        )
    }
}

fn io_err(path: &Path, source: std::io::Error) -> GcgpError {
    GcgpError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| io_err(path, e))
}

fn lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    Ok(BufReader::new(f).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> GcgpError {
    GcgpError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_features(path: &Path) -> Result<DMatrix<f64>> {
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (lineno, line) in lines(path)? {
        let line = line.map_err(|e| io_err(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let before = values.len();
        for cell in line.split(',') {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("invalid number `{cell}`")))?;
            values.push(v);
        }
        let w = values.len() - before;
        match width {
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("ragged row: {w} columns, expected {expected}"),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let d = width.ok_or_else(|| parse_err(path, 0, "no feature rows"))?;
    Ok(DMatrix::from_row_slice(rows, d, &values))
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (lineno, line) in lines(path)? {
        let line = line.map_err(|e| io_err(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(
            line.parse()
                .map_err(|_| parse_err(path, lineno, format!("invalid label `{line}`")))?,
        );
    }
    Ok(out)
}

/// Reads `src,dst` pairs. Each undirected edge is listed once; a file that
/// lists some edges in both orientations and others in only one is rejected
/// as asymmetric.
fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (lineno, line) in lines(path)? {
        let line = line.map_err(|e| io_err(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(path, lineno, "expected `src,dst`"));
        };
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| parse_err(path, lineno, format!("invalid node index `{s}`")))
        };
        out.push((parse(a)?, parse(b)?));
    }
    let directed: HashSet<(usize, usize)> = out.iter().copied().collect();
    let reversed = directed
        .iter()
        .filter(|&&(u, v)| directed.contains(&(v, u)))
        .count();
    if reversed > 0 && reversed < directed.len() {
        return Err(GcgpError::validation(format!(
            "{} asymmetric edge list: {reversed} of {} directed pairs have a reverse entry",
            path.display(),
            directed.len()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn isolated_node_normalizes_to_one() {
        let a = normalize_adjacency(&dense(1, 1, &[0.0])).unwrap();
        assert_eq!(a[(0, 0)], 1.0);
    }

    #[test]
    fn single_edge_normalizes_to_halves() {
        let a = normalize_adjacency(&dense(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        for v in a.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn path_graph_matches_dense_oracle() {
        // D̃ = diag(2, 3, 2)
        let a = dense(3, 3, &[0., 1., 0., 1., 0., 1., 0., 1., 0.]);
        let expected = dense(
            3,
            3,
            &[
                0.5,
                0.408_248_290_463_863_1,
                0.0,
                0.408_248_290_463_863_1,
                0.333_333_333_333_333_3,
                0.408_248_290_463_863_1,
                0.0,
                0.408_248_290_463_863_1,
                0.5,
            ],
        );
        let got = normalize_adjacency(&a).unwrap();
        assert!((got - &expected).amax() < 1e-12);
        let sparse = SparseAdjacency::from_dense(&a).unwrap().normalized().to_dense();
        assert!((sparse - expected).amax() < 1e-12);
    }

    #[test]
    fn rejects_asymmetric_and_negative() {
        assert!(normalize_adjacency(&dense(2, 2, &[0.0, 1.0, 0.0, 0.0])).is_err());
        assert!(normalize_adjacency(&dense(2, 2, &[0.0, -1.0, -1.0, 0.0])).is_err());
        assert!(SparseAdjacency::from_dense(&dense(2, 2, &[0.0, 0.5, 0.5, 0.0])).is_err());
    }

    #[test]
    fn propagate_identity_cases() {
        let x = dense(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let a = normalize_adjacency(&dense(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(propagate(&a, &x, 0).unwrap(), x);

        let one = dense(1, 3, &[0.3, -1.0, 2.0]);
        let a1 = normalize_adjacency(&dense(1, 1, &[0.0])).unwrap();
        assert_eq!(propagate(&a1, &one, 5).unwrap(), one);
    }

    #[test]
    fn two_hop_on_single_edge() {
        let a = normalize_adjacency(&dense(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let x = DMatrix::identity(2, 2);
        let got = propagate(&a, &x, 2).unwrap();
        assert!((got - DMatrix::from_element(2, 2, 0.5)).amax() < 1e-15);
    }

    #[test]
    fn propagate_dimension_mismatch() {
        let a = DMatrix::<f64>::identity(3, 3);
        assert!(propagate(&a, &DMatrix::zeros(2, 1), 1).is_err());
    }

    #[test]
    fn hop_limit() {
        let cfg = PropagationConfig {
            k: MAX_HOPS + 1,
            row_normalize_features: false,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn graph_rejects_bad_labels_and_overlapping_splits() {
        let x = DMatrix::zeros(3, 2);
        let adj = SparseAdjacency::from_edges(3, &[(0, 1)]).unwrap();
        let splits = Splits {
            train: vec![0],
            val: vec![1],
            test: vec![2],
        };
        assert!(Graph::new(x.clone(), adj.clone(), vec![0, 1, 2], 2, splits.clone()).is_err());
        let overlapping = Splits {
            train: vec![0, 1],
            val: vec![1],
            test: vec![2],
        };
        assert!(Graph::new(x, adj, vec![0, 1, 1], 2, overlapping).is_err());
    }

    #[test]
    fn edge_list_validation() {
        assert!(SparseAdjacency::from_edges(2, &[(0, 2)]).is_err());
        assert!(SparseAdjacency::from_edges(2, &[(1, 1)]).is_err());
        let a = SparseAdjacency::from_edges(3, &[(0, 1), (1, 0), (2, 1)]).unwrap();
        assert_eq!(a.num_edges(), 2);
        assert_eq!(a.edges(), vec![(0, 1), (1, 2)]);
    }
}
