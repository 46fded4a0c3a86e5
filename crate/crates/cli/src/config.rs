//! Run configuration: defaults, a flat `key = value` file, then flags.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gcgp_core::condense::{InitKind, LossRows, OptimizerKind};
use gcgp_core::{CondenseConfig, FeatureScale, KernelKind};
use serde::{Deserialize, Serialize};

/// Everything a batch run needs. Serialized into every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Condensation seeds `seed, seed + 1, ...`.
    pub seeds: usize,
    /// Also evaluate Random and K-Center selections of the same size.
    pub baselines: bool,
    pub betas: Vec<f64>,
    pub ks: Vec<usize>,
    pub sizes: Vec<usize>,
    pub bench_steps: usize,
    pub condense: CondenseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: None,
            seeds: 1,
            baselines: false,
            betas: vec![1e-3, 1e-2, 0.1, 0.5, 1.0, 10.0],
            ks: vec![1, 2, 3, 4, 5],
            sizes: vec![32, 64, 128, 256],
            bench_steps: 5,
            condense: CondenseConfig::default(),
        }
    }
}

/// Every key the file and the flags accept, in canonical order.
pub const KEYS: &[&str] = &[
    "dataset",
    "out",
    "seed",
    "seeds",
    "baselines",
    "size",
    "per_class",
    "k",
    "beta",
    "sigma_w2",
    "feature_scale",
    "kernel",
    "row_normalize_features",
    "learn_structure",
    "learning_rate",
    "structure_learning_rate",
    "epochs",
    "tau0",
    "tau_end",
    "alpha_init_std",
    "optimizer",
    "loss_rows",
    "batch_rows",
    "init",
    "freeze_labels",
    "fixed_noise",
    "early_stop_window",
    "early_stop_tol",
    "betas",
    "ks",
    "sizes",
    "bench_steps",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| format!("invalid value `{value}` for `{key}`: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("invalid value `{value}` for `{key}`: expected true or false")),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(format!("`{key}` needs at least one value"));
    }
    Ok(items)
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, String>
where
    T::Err: Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn optional<T: Display>(x: &Option<T>) -> String {
    x.as_ref().map_or_else(|| "none".to_string(), ToString::to_string)
}

fn canonical(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl RunConfig {
    /// Applies one setting. `size` and `per_class` replace each other.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        let c = &mut self.condense;
        match canonical(key).as_str() {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "seed" => c.seed = parse(key, value)?,
            "seeds" => self.seeds = parse(key, value)?,
            "baselines" => self.baselines = parse_bool(key, value)?,
            "size" => {
                c.size = parse_optional(key, value)?;
                if c.size.is_some() {
                    c.per_class = None;
                }
            }
            "per_class" => {
                c.per_class = parse_optional(key, value)?;
                if c.per_class.is_some() {
                    c.size = None;
                }
            }
            "k" => c.k = parse(key, value)?,
            "beta" => c.beta = parse(key, value)?,
            "sigma_w2" => c.sigma_w2 = parse(key, value)?,
            "feature_scale" => c.feature_scale = parse::<FeatureScale>(key, value)?,
            "kernel" => c.kernel = parse::<KernelKind>(key, value)?,
            "row_normalize_features" => c.row_normalize_features = parse_bool(key, value)?,
            "learn_structure" => c.learn_structure = parse_bool(key, value)?,
            "learning_rate" => c.learning_rate = parse(key, value)?,
            "structure_learning_rate" => c.structure_learning_rate = parse_optional(key, value)?,
            "epochs" => c.epochs = parse(key, value)?,
            "tau0" => c.tau.tau0 = parse(key, value)?,
            "tau_end" => c.tau.tau_end = parse(key, value)?,
            "alpha_init_std" => c.alpha_init_std = parse(key, value)?,
            "optimizer" => {
                c.optimizer = match value {
                    "adam" => OptimizerKind::adam(),
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(format!("invalid value `{value}` for `{key}`: expected adam or sgd")),
                }
            }
            "loss_rows" => {
                c.loss_rows = match value {
                    "train" => LossRows::Train,
                    "all-labeled" | "all_labeled" => LossRows::AllLabeled,
                    _ => {
                        return Err(format!(
                            "invalid value `{value}` for `{key}`: expected train or all-labeled"
                        ))
                    }
                }
            }
            "batch_rows" => c.batch_rows = parse_optional(key, value)?,
            "init" => {
                c.init = match value {
                    "sample" => InitKind::Sample,
                    "gaussian" => InitKind::Gaussian,
                    _ => return Err(format!("invalid value `{value}` for `{key}`: expected sample or gaussian")),
                }
            }
            "freeze_labels" => c.freeze_labels = parse_bool(key, value)?,
            "fixed_noise" => c.fixed_noise = parse_bool(key, value)?,
            "early_stop_window" => c.early_stop_window = parse(key, value)?,
            "early_stop_tol" => c.early_stop_tol = parse(key, value)?,
            "betas" => self.betas = parse_list(key, value)?,
            "ks" => self.ks = parse_list(key, value)?,
            "sizes" => self.sizes = parse_list(key, value)?,
            "bench_steps" => self.bench_steps = parse(key, value)?,
            other => return Err(format!("unknown config key `{other}` (known keys: {})", KEYS.join(", "))),
        }
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment. Repeated keys and
    /// unknown keys are errors.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        self.apply_str(&text)
            .map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn apply_str(&mut self, text: &str) -> Result<(), String> {
        let mut seen = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", no + 1))?;
            let key = canonical(key);
            if seen.contains(&key) {
                return Err(format!("line {}: `{key}` set twice", no + 1));
            }
            self.set(&key, value).map_err(|e| format!("line {}: {e}", no + 1))?;
            seen.push(key);
        }
        Ok(())
    }

    /// The full configuration as `key = value` lines, readable by
    /// [`RunConfig::apply_str`].
    pub fn to_file_string(&self) -> String {
        let c = &self.condense;
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut lines = Vec::new();
        let mut put = |k: &str, v: String| lines.push(format!("{k} = {v}"));
        if let Some(d) = opt_path(&self.dataset) {
            put("dataset", d);
        }
        if let Some(o) = opt_path(&self.out) {
            put("out", o);
        }
        put("seed", c.seed.to_string());
        put("seeds", self.seeds.to_string());
        put("baselines", self.baselines.to_string());
        match (c.size, c.per_class) {
            (_, Some(p)) => put("per_class", p.to_string()),
            (s, None) => put("size", optional(&s)),
        }
        put("k", c.k.to_string());
        put("beta", c.beta.to_string());
        put("sigma_w2", c.sigma_w2.to_string());
        put("feature_scale", c.feature_scale.to_string());
        put("kernel", c.kernel.to_string());
        put("row_normalize_features", c.row_normalize_features.to_string());
        put("learn_structure", c.learn_structure.to_string());
        put("learning_rate", c.learning_rate.to_string());
        put("structure_learning_rate", optional(&c.structure_learning_rate));
        put("epochs", c.epochs.to_string());
        put("tau0", c.tau.tau0.to_string());
        put("tau_end", c.tau.tau_end.to_string());
        put("alpha_init_std", c.alpha_init_std.to_string());
        put(
            "optimizer",
            match c.optimizer {
                OptimizerKind::Sgd => "sgd".into(),
                OptimizerKind::Adam { .. } => "adam".into(),
            },
        );
        put(
            "loss_rows",
            match c.loss_rows {
                LossRows::Train => "train".into(),
                LossRows::AllLabeled => "all-labeled".into(),
            },
        );
        put("batch_rows", optional(&c.batch_rows));
        put(
            "init",
            match c.init {
                InitKind::Sample => "sample".into(),
                InitKind::Gaussian => "gaussian".into(),
            },
        );
        put("freeze_labels", c.freeze_labels.to_string());
        put("fixed_noise", c.fixed_noise.to_string());
        put("early_stop_window", c.early_stop_window.to_string());
        put("early_stop_tol", c.early_stop_tol.to_string());
        put("betas", join(&self.betas));
        put("ks", join(&self.ks));
        put("sizes", join(&self.sizes));
        put("bench_steps", self.bench_steps.to_string());
        lines.join("\n") + "\n"
    }

    /// Checks that do not need the dataset loaded.
    pub fn validate(&self) -> Result<(), String> {
        self.condense.validate().map_err(|e| e.to_string())?;
        if self.seeds == 0 {
            return Err("seeds must be at least 1".into());
        }
        if let Some(b) = self.betas.iter().find(|b| !(**b > 0.0)) {
            return Err(format!("sweep beta {b} must be positive"));
        }
        if self.sizes.contains(&0) {
            return Err("bench sizes must be positive".into());
        }
        Ok(())
    }

    /// The dataset directory, which must exist.
    pub fn dataset_dir(&self) -> Result<&Path, String> {
        let dir = self
            .dataset
            .as_deref()
            .ok_or("no dataset given (use --dataset or `dataset = ...` in the config file)")?;
        if !dir.is_dir() {
            return Err(format!("dataset directory {} does not exist", dir.display()));
        }
        Ok(dir)
    }
}
