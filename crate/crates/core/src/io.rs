//! On-disk artifacts: condensed graphs, metrics and CSV tables.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::condense::{CondensedGraph, Provenance};
use crate::error::{GcgpError, Result};
use crate::eval::{SweepCell, TimingReport};
use crate::relax::RelaxedStructure;

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], cols: usize, what: &str) -> Result<DMatrix<f64>> {
    if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
        return Err(GcgpError::validation(format!(
            "{what} row {bad} has {} entries, expected {cols}",
            rows[bad].len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// JSON layout of a saved condensed graph.
#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CondensedFile {
    pub X_s: Vec<Vec<f64>>,
    pub Y_s: Vec<Vec<f64>>,
    /// Edge parameters, present only when structure was learned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_alpha: Option<Vec<Vec<f64>>>,
    pub A_s_binary: Vec<Vec<u8>>,
    pub tau: f64,
    pub learn_structure: bool,
    #[serde(default)]
    pub rng_stream: u64,
    pub provenance: Provenance,
    pub config: Value,
}

impl CondensedFile {
    pub fn from_graph(cg: &CondensedGraph, config: Value) -> Self {
        let learned = cg.structure.learn_structure;
        let binary = cg.structure.discretize();
        Self {
            X_s: rows_of(&cg.xs),
            Y_s: rows_of(&cg.ys),
            alpha: learned.then(|| rows_of(&cg.structure.log_alpha.map(f64::exp))),
            log_alpha: learned.then(|| rows_of(&cg.structure.log_alpha)),
            A_s_binary: binary
                .row_iter()
                .map(|r| r.iter().map(|&v| u8::from(v != 0.0)).collect())
                .collect(),
            tau: cg.structure.tau,
            learn_structure: learned,
            rng_stream: cg.structure.rng_stream,
            provenance: cg.provenance.clone(),
            config,
        }
    }

    pub fn to_graph(&self) -> Result<CondensedGraph> {
        let m = self.X_s.len();
        if self.Y_s.len() != m {
            return Err(GcgpError::shape("condensed file", format!("{m} label rows"), self.Y_s.len()));
        }
        let d = self.X_s.first().map_or(0, Vec::len);
        let c = self.Y_s.first().map_or(0, Vec::len);
        let xs = from_rows(&self.X_s, d, "X_s")?;
        let ys = from_rows(&self.Y_s, c, "Y_s")?;
        let structure = if self.learn_structure {
            let log_alpha = match (&self.log_alpha, &self.alpha) {
                (Some(la), _) => from_rows(la, m, "log_alpha")?,
                (None, Some(a)) => from_rows(a, m, "alpha")?.map(f64::ln),
                (None, None) => {
                    return Err(GcgpError::validation(
                        "condensed file has learned structure but no alpha",
                    ))
                }
            };
            if log_alpha.nrows() != m {
                return Err(GcgpError::shape("alpha", format!("{m}x{m}"), log_alpha.nrows()));
            }
            RelaxedStructure {
                log_alpha,
                tau: self.tau,
                learn_structure: true,
                rng_stream: self.rng_stream,
            }
        } else {
            RelaxedStructure {
                tau: self.tau,
                ..RelaxedStructure::disabled(m, self.rng_stream)
            }
        };
        Ok(CondensedGraph {
            xs,
            ys,
            structure,
            provenance: self.provenance.clone(),
        })
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| GcgpError::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| GcgpError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Pretty-printed JSON of any serializable value.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    write(path.as_ref(), &serde_json::to_string_pretty(value)?)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GcgpError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_condensed(path: impl AsRef<Path>, cg: &CondensedGraph, config: Value) -> Result<()> {
    write_json(path, &CondensedFile::from_graph(cg, config))
}

/// Loads a condensed graph together with the config it was produced with.
pub fn load_condensed(path: impl AsRef<Path>) -> Result<(CondensedGraph, Value)> {
    let file: CondensedFile = read_json(path)?;
    Ok((file.to_graph()?, file.config))
}

pub fn write_sweep_csv(path: impl AsRef<Path>, cells: &[SweepCell]) -> Result<()> {
    let mut out = String::from("beta,k,acc_mean,acc_std\n");
    for c in cells {
        out.push_str(&format!("{},{},{},{}\n", c.beta, c.k, c.acc_mean, c.acc_std));
    }
    write(path.as_ref(), &out)
}

pub fn write_timing_csv(path: impl AsRef<Path>, report: &TimingReport) -> Result<()> {
    let mut out = String::from("m,step_ms\n");
    for r in &report.rows {
        out.push_str(&format!("{},{}\n", r.m, r.step_ms));
    }
    write(path.as_ref(), &out)
}
