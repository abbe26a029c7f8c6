//! Run configuration, read from TOML. Relative paths are resolved against
//! the directory holding the config file.
//!
//! ```toml
//! output = "runs/demo"
//!
//! [dataset]
//! standardize = true
//! mislabel_fraction = 0.2      # optional, binary classification only
//!
//! [dataset.source]
//! type = "synthetic"
//! generator = { kind = "two_gaussians", separation = 1.0 }
//! n = 500
//! d = 4
//! noise = 1.0
//! seed = 0
//! # or: type = "csv", path = "data.csv", target = "y",
//! #     target_kind = "classification", categorical = ["c"], ignore = ["id"]
//!
//! [split]
//! test_fraction = 0.2
//! seed = 0
//!
//! [model]
//! hidden = [32, 32]
//! activation = "relu"
//! init_seed = 0
//!
//! [train]
//! optimizer = "sgd"
//! lr = 0.1
//! epochs = 50
//! batch_size = 32
//! shuffle_seed = 0
//!
//! [further_train]              # every field optional; lr defaults to train.lr / 10
//! epochs = 20
//! checkpoint_every = { epochs = 1 }
//!
//! [subsets]
//! l = 20
//! m = 20
//! seed = 0
//!
//! [gold]
//! seed_count = 100
//! adjustment = "mean_subtract"
//!
//! [report]
//! metric = "cosine"
//! group_sizes = [1, 2, 5, 10, 20]
//! top_k = 5
//!
//! [[attributors]]
//! method = "grad_dot"
//!
//! [[attributors]]
//! method = "influence"
//! curvature = "gauss_newton"
//! solver = { kind = "lissa" }
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attributors::{AttributorSpec, Curvature, SolverConfig};
use crate::data::{CsvSchema, SplitSpec, SyntheticKind, TargetKind};
use crate::error::{Error, Result};
use crate::eval::Metric;
use crate::goldstd::Adjustment;
use crate::model::Activation;
use crate::training::{CheckpointEvery, Optimizer, TrainPlan};

pub const DEFAULT_SEED_COUNT: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainPlan,
    #[serde(default)]
    pub further_train: FurtherTrainConfig,
    pub subsets: SubsetConfig,
    #[serde(default)]
    pub gold: GoldConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default = "default_attributors")]
    pub attributors: Vec<AttributorSpec>,
}

fn default_output() -> PathBuf {
    PathBuf::from("fimoda-out")
}

fn default_attributors() -> Vec<AttributorSpec> {
    vec![
        AttributorSpec::GradDot { damping: crate::solvers::DEFAULT_DAMPING },
        AttributorSpec::GradCos,
        AttributorSpec::Influence {
            curvature: Curvature::TrueHessian,
            damping: crate::solvers::DEFAULT_DAMPING,
            solver: SolverConfig::cg(),
        },
        AttributorSpec::Influence {
            curvature: Curvature::GaussNewton,
            damping: crate::solvers::DEFAULT_DAMPING,
            solver: SolverConfig::cg(),
        },
        AttributorSpec::DataInf {
            lambda_const: crate::attributors::DEFAULT_DATAINF_CONST,
        },
    ]
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Fraction of the attributed subset whose labels are flipped before training.
    #[serde(default)]
    pub mislabel_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        target: String,
        #[serde(default)]
        target_kind: TargetKind,
        #[serde(default)]
        categorical: Vec<String>,
        #[serde(default)]
        ignore: Vec<String>,
    },
    Synthetic {
        generator: SyntheticKind,
        n: usize,
        d: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl DataSource {
    pub fn csv_schema(&self) -> Option<CsvSchema> {
        match self {
            DataSource::Csv {
                target,
                target_kind,
                categorical,
                ignore,
                ..
            } => Some(CsvSchema {
                target: target.clone(),
                target_kind: *target_kind,
                categorical: categorical.clone(),
                ignore: ignore.clone(),
            }),
            DataSource::Synthetic { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn spec(&self) -> SplitSpec {
        SplitSpec {
            test_fraction: self.test_fraction,
            split_seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            activation: Activation::Relu,
            init_seed: 0,
        }
    }
}

/// Overrides for the further-training plan; unset fields come from the
/// original plan, except the learning rate which defaults to a tenth of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FurtherTrainConfig {
    pub optimizer: Option<Optimizer>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub shuffle_seed: Option<u64>,
    pub weight_decay: Option<f64>,
    pub checkpoint_every: Option<CheckpointEvery>,
}

impl FurtherTrainConfig {
    pub fn resolve(&self, original: &TrainPlan) -> TrainPlan {
        let base = original.further_training_default(self.epochs.unwrap_or(original.epochs));
        TrainPlan {
            optimizer: self.optimizer.unwrap_or(base.optimizer),
            lr: self.lr.unwrap_or(base.lr),
            epochs: base.epochs,
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            shuffle_seed: self.shuffle_seed.unwrap_or(base.shuffle_seed),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            checkpoint_every: self.checkpoint_every.unwrap_or(base.checkpoint_every),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetConfig {
    pub l: usize,
    pub m: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoldConfig {
    pub seed_count: usize,
    pub adjustment: Adjustment,
    /// Also run leave-one-out retraining from the initialization.
    pub retrain: bool,
}

impl Default for GoldConfig {
    fn default() -> Self {
        Self {
            seed_count: DEFAULT_SEED_COUNT,
            adjustment: Adjustment::MeanSubtract,
            retrain: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub metric: Metric,
    /// Seed group sizes; empty means every divisor of the seed count.
    pub group_sizes: Vec<usize>,
    pub top_k: usize,
    pub svg: bool,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Cosine,
            group_sizes: Vec::new(),
            top_k: 5,
            svg: true,
        }
    }
}

impl ReportConfig {
    pub fn group_sizes_for(&self, r: usize) -> Vec<usize> {
        if self.group_sizes.is_empty() {
            (1..=r).filter(|&g| r.is_multiple_of(g)).collect()
        } else {
            self.group_sizes.clone()
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if self.output.is_relative() {
            self.output = base.join(&self.output);
        }
        if let DataSource::Csv { path, .. } = &mut self.dataset.source {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn further_plan(&self) -> TrainPlan {
        self.further_train.resolve(&self.train)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every invariant that can be checked before loading data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match &self.dataset.source {
            DataSource::Csv { path, .. } => {
                if !path.is_file() {
                    return bad(format!("dataset file {} does not exist", path.display()));
                }
            }
            DataSource::Synthetic { n, d, noise, .. } => {
                if *n < 4 || *d < 1 {
                    return bad(format!("synthetic data needs n >= 4 and d >= 1, got n={n}, d={d}"));
                }
                if !(*noise >= 0.0) {
                    return bad(format!("noise must be >= 0, got {noise}"));
                }
            }
        }
        if let Some(f) = self.dataset.mislabel_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("mislabel_fraction {f} outside (0, 1]"));
            }
            let binary = match &self.dataset.source {
                DataSource::Synthetic { generator, .. } => matches!(generator, SyntheticKind::TwoGaussians { .. }),
                DataSource::Csv { target_kind, .. } => *target_kind == TargetKind::Classification,
            };
            if !binary {
                return bad("mislabel_fraction needs a classification dataset".into());
            }
        }
        let f = self.split.test_fraction;
        if !(f > 0.0 && f < 1.0) {
            return bad(format!("split.test_fraction {f} outside (0, 1)"));
        }
        if self.model.hidden.contains(&0) {
            return bad("hidden layer widths must be >= 1".into());
        }
        self.train.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        self.further_plan()
            .validate()
            .map_err(|e| Error::Config(format!("further_train: {e}")))?;
        if self.subsets.l < 2 {
            return bad(format!("subsets.l must be >= 2, got {}", self.subsets.l));
        }
        if self.subsets.m < 1 {
            return bad("subsets.m must be >= 1".into());
        }
        let r = self.gold.seed_count;
        if r < 1 {
            return bad("gold.seed_count must be >= 1".into());
        }
        if let Some(&g) = self.report.group_sizes.iter().find(|&&g| g == 0 || g > r) {
            return bad(format!("group size {g} must be in [1, {r}]"));
        }
        let mut labels = BTreeSet::new();
        for a in &self.attributors {
            a.validate().map_err(|e| Error::Config(format!("{}: {e}", a.label())))?;
            if !labels.insert(a.label()) {
                return bad(format!("attributor {} listed twice", a.label()));
            }
        }
        Ok(())
    }

    /// Seed count after an optional command-line override.
    pub fn with_seed_count(mut self, r: Option<usize>) -> Self {
        if let Some(r) = r {
            self.gold.seed_count = r;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [dataset.source]
        type = "synthetic"
        generator = { kind = "linear_regression" }
        n = 50
        d = 2

        [train]
        lr = 0.1
        epochs = 10
        batch_size = 8

        [subsets]
        l = 4
        m = 3
    "#;

    #[test]
    fn defaults_are_filled() {
        let cfg = RunConfig::from_toml(MINIMAL, Path::new("/base")).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.output, PathBuf::from("/base/fimoda-out"));
        assert_eq!(cfg.gold.seed_count, 100);
        assert_eq!(cfg.model.hidden, vec![128, 128]);
        let fp = cfg.further_plan();
        assert!((fp.lr - 0.01).abs() < 1e-15);
        assert_eq!(fp.epochs, 10);
        assert_eq!(fp.batch_size, 8);
        assert_eq!(cfg.attributors.len(), 5);
        assert_eq!(cfg.report.group_sizes_for(6), vec![1, 2, 3, 6]);
        let again = RunConfig::from_toml(&cfg.to_toml(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn invalid_configs_rejected() {
        let with = |extra: &str, from: &str, to: &str| {
            let text = MINIMAL.replace(from, to) + extra;
            RunConfig::from_toml(&text, Path::new(".")).and_then(|c| c.validate())
        };
        assert!(with("", "l = 4", "l = 1").is_err());
        assert!(with("", "lr = 0.1", "lr = 0.0").is_err());
        assert!(with("[gold]\nseed_count = 0\n", "", "").is_err());
        assert!(with("[report]\ngroup_sizes = [3]\n[gold]\nseed_count = 2\n", "", "").is_err());
        assert!(with("", "n = 50", "n = 50\nbogus = 1").is_err());
        assert!(with(
            "[[attributors]]\nmethod = \"grad_dot\"\n[[attributors]]\nmethod = \"grad_dot\"\n",
            "",
            ""
        )
        .is_err());
        let missing = r#"
            [dataset.source]
            type = "csv"
            path = "definitely/not/here.csv"
            target = "y"
        "#;
        let text = MINIMAL.replace(
            "[dataset.source]\n        type = \"synthetic\"\n        generator = { kind = \"linear_regression\" }\n        n = 50\n        d = 2\n",
            missing,
        );
        let err = RunConfig::from_toml(&text, Path::new(".")).unwrap().validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(with("[dataset]\nmislabel_fraction = 0.2\n", "", "").is_err());
    }
}
