//! Tabular datasets: CSV ingestion, standardization, splitting, synthetic
//! generation and label corruption.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Domain, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Regression,
    Classification { num_classes: usize },
}

impl Task {
    pub fn output_dim(&self) -> usize {
        match self {
            Task::Regression => 1,
            Task::Classification { num_classes } => *num_classes,
        }
    }
}

/// Immutable feature matrix plus targets. Classification targets are class
/// indices stored as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    targets: Vec<f64>,
    task: Task,
    ids: Vec<u64>,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        targets: Vec<f64>,
        task: Task,
        ids: Vec<u64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let n = features.nrows();
        if targets.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: targets.len(),
            });
        }
        if ids.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: ids.len(),
            });
        }
        if feature_names.len() != features.ncols() {
            return Err(Error::DimensionMismatch {
                expected: features.ncols(),
                got: feature_names.len(),
            });
        }
        if let Task::Classification { num_classes } = task {
            if num_classes < 2 {
                return Err(Error::InvalidArgument(
                    "classification needs at least 2 classes".into(),
                ));
            }
            if let Some(bad) = targets
                .iter()
                .find(|&&y| y < 0.0 || y.fract() != 0.0 || y as usize >= num_classes)
            {
                return Err(Error::InvalidArgument(format!(
                    "class label {bad} outside [0, {num_classes})"
                )));
            }
        }
        Ok(Self {
            features,
            targets,
            task,
            ids,
            feature_names,
        })
    }

    /// Dataset with ids `0..n` and generated feature names `x0, x1, ...`.
    pub fn from_parts(features: Array2<f64>, targets: Vec<f64>, task: Task) -> Result<Self> {
        let ids = (0..features.nrows() as u64).collect();
        let names = (0..features.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(features, targets, task, ids, names)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            task: self.task,
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    pub fn with_targets(&self, targets: Vec<f64>) -> Result<Dataset> {
        Dataset::new(
            self.features.clone(),
            targets,
            self.task,
            self.ids.clone(),
            self.feature_names.clone(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.features.iter().all(|x| x.is_finite()) && self.targets.iter().all(|y| y.is_finite())
    }

    /// Writes `id, <features...>, target` with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header = vec!["id".to_string()];
        header.extend(self.feature_names.iter().cloned());
        header.push("target".into());
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for i in 0..self.len() {
            let mut rec = vec![self.ids[i].to_string()];
            rec.extend(self.features.row(i).iter().map(|x| x.to_string()));
            rec.push(self.targets[i].to_string());
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    #[default]
    Regression,
    Classification,
}

/// Column roles for [`load_csv`]. Columns not named as target, categorical
/// or ignored are parsed as numeric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub target: String,
    #[serde(default)]
    pub target_kind: TargetKind,
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub ignore: Vec<String>,
}

impl CsvSchema {
    pub fn regression(target: &str) -> Self {
        Self {
            target: target.into(),
            target_kind: TargetKind::Regression,
            categorical: Vec::new(),
            ignore: Vec::new(),
        }
    }

    pub fn classification(target: &str) -> Self {
        Self {
            target_kind: TargetKind::Classification,
            ..Self::regression(target)
        }
    }
}

/// Reads a UTF-8 CSV with a header row. Categorical columns are one-hot
/// coded (one column per distinct value, values in sorted order, no level
/// dropped). Row numbers in errors count the header as row 1.
///
/// Classification targets that are all non-negative integers are used as
/// class indices directly; otherwise distinct labels are indexed in sorted
/// order.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let target_col = header
        .iter()
        .position(|h| *h == schema.target)
        .ok_or_else(|| Error::Config(format!("target column `{}` not in header", schema.target)))?;
    for name in schema.categorical.iter().chain(&schema.ignore) {
        if !header.contains(name) {
            return Err(Error::Config(format!("column `{name}` not in header")));
        }
    }

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                row,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }

    enum Role {
        Numeric,
        Categorical(Vec<String>),
    }
    let mut roles: Vec<(usize, Role)> = Vec::new();
    for (c, name) in header.iter().enumerate() {
        if c == target_col || schema.ignore.contains(name) {
            continue;
        }
        if schema.categorical.contains(name) {
            let levels: BTreeSet<&str> = rows.iter().map(|r| r[c].as_str()).collect();
            roles.push((c, Role::Categorical(levels.into_iter().map(String::from).collect())));
        } else {
            roles.push((c, Role::Numeric));
        }
    }

    let mut names = Vec::new();
    for (c, role) in &roles {
        match role {
            Role::Numeric => names.push(header[*c].clone()),
            Role::Categorical(levels) => {
                names.extend(levels.iter().map(|v| format!("{}={}", header[*c], v)))
            }
        }
    }

    let n = rows.len();
    let mut features = Array2::<f64>::zeros((n, names.len()));
    for (i, r) in rows.iter().enumerate() {
        let mut j = 0;
        for (c, role) in &roles {
            match role {
                Role::Numeric => {
                    features[[i, j]] = parse_number(&r[*c], i + 2, &header[*c])?;
                    j += 1;
                }
                Role::Categorical(levels) => {
                    let hit = levels.iter().position(|v| *v == r[*c]).expect("level seen");
                    features[[i, j + hit]] = 1.0;
                    j += levels.len();
                }
            }
        }
    }

    let raw_targets: Vec<&str> = rows.iter().map(|r| r[target_col].as_str()).collect();
    let (targets, task) = match schema.target_kind {
        TargetKind::Regression => {
            let ys = raw_targets
                .iter()
                .enumerate()
                .map(|(i, v)| parse_number(v, i + 2, &schema.target))
                .collect::<Result<Vec<_>>>()?;
            (ys, Task::Regression)
        }
        TargetKind::Classification => encode_classes(&raw_targets),
    };
    Dataset::new(features, targets, task, (0..n as u64).collect(), names)
}

fn parse_number(cell: &str, row: usize, column: &str) -> Result<f64> {
    cell.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::NonNumeric {
            row,
            column: column.to_string(),
            value: cell.to_string(),
        })
}

fn encode_classes(raw: &[&str]) -> (Vec<f64>, Task) {
    let as_ints: Option<Vec<usize>> = raw.iter().map(|v| v.parse::<usize>().ok()).collect();
    if let Some(ints) = as_ints {
        let k = ints.iter().copied().max().map_or(2, |m| (m + 1).max(2));
        return (
            ints.into_iter().map(|c| c as f64).collect(),
            Task::Classification { num_classes: k },
        );
    }
    let levels: BTreeMap<&str, usize> = raw
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(k, v)| (v, k))
        .collect();
    let k = levels.len().max(2);
    (
        raw.iter().map(|v| levels[v] as f64).collect(),
        Task::Classification { num_classes: k },
    )
}

/// Per-column affine map `z = (x - mean) / std` (population std). Columns with
/// zero variance have `std == 0` and map to all zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationStats {
    pub fn apply(&self, features: &Array2<f64>) -> Array2<f64> {
        let mut out = features.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            col.mapv_inplace(|x| if s > 0.0 { (x - m) / s } else { 0.0 });
        }
        out
    }

    pub fn invert(&self, standardized: &Array2<f64>) -> Array2<f64> {
        let mut out = standardized.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            col.mapv_inplace(|z| z * s + m);
        }
        out
    }
}

pub fn standardize(ds: &Dataset, stats_from: &[usize]) -> Result<(Dataset, StandardizationStats)> {
    if stats_from.is_empty() {
        return Err(Error::InvalidArgument(
            "standardization needs at least one reference row".into(),
        ));
    }
    let reference = ds.features.select(Axis(0), stats_from);
    let count = stats_from.len() as f64;
    let mean: Array1<f64> = reference.sum_axis(Axis(0)) / count;
    let mut std = Vec::with_capacity(ds.dim());
    for (j, col) in reference.columns().into_iter().enumerate() {
        let var = col.iter().map(|x| (x - mean[j]).powi(2)).sum::<f64>() / count;
        // Relative threshold so constant columns with rounding noise count as constant.
        let scale = mean[j].abs().max(1.0);
        std.push(if var.sqrt() <= 1e-12 * scale { 0.0 } else { var.sqrt() });
    }
    let stats = StandardizationStats {
        mean: mean.to_vec(),
        std,
    };
    let features = stats.apply(&ds.features);
    let out = Dataset {
        features,
        ..ds.clone()
    };
    if !out.is_finite() {
        return Err(Error::InvalidArgument("non-finite values after standardization".into()));
    }
    Ok((out, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub split_seed: u64,
}

/// Train/test index sets, each ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    let f = spec.test_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction {f} outside (0, 1)"
        )));
    }
    // |train| = ceil(n (1 - f)), i.e. |test| = floor(n f); the epsilon guards
    // products like 10 * 0.1 that land just below an integer.
    let n_test = ((n as f64) * f + 1e-9).floor() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::InvalidArgument(format!(
            "split of {n} rows at fraction {f} leaves an empty side"
        )));
    }
    let perm = SeededRng::new(spec.split_seed, Domain::Split, 0).permutation(n);
    let mut test = perm[..n_test].to_vec();
    let mut train = perm[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(SplitIndices { train, test })
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let idx = split_indices(ds.len(), spec)?;
    Ok((ds.subset(&idx.train), ds.subset(&idx.test)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SyntheticKind {
    /// `y = x . w* + noise * eps`, `x ~ N(0, I)`. `w*` is drawn from N(0, I)
    /// unless given.
    LinearRegression {
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
    /// Balanced-in-expectation binary blobs with means `+-separation * 1` and
    /// isotropic standard deviation `noise`.
    TwoGaussians { separation: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SyntheticTruth {
    Weights(Vec<f64>),
    ClassMeans([Vec<f64>; 2]),
}

pub fn make_synthetic(
    kind: &SyntheticKind,
    n: usize,
    d: usize,
    noise: f64,
    seed: u64,
) -> Result<(Dataset, SyntheticTruth)> {
    if n < 4 || d < 1 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs n >= 4 and d >= 1 (got n={n}, d={d})"
        )));
    }
    let mut rng = SeededRng::new(seed, Domain::Synthetic, 0);
    match kind {
        SyntheticKind::LinearRegression { weights } => {
            let w = match weights {
                Some(w) if w.len() != d => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: w.len(),
                    })
                }
                Some(w) => w.clone(),
                None => (0..d).map(|_| rng.standard_normal()).collect(),
            };
            let mut x = Array2::zeros((n, d));
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                for j in 0..d {
                    x[[i, j]] = rng.standard_normal();
                }
                let clean: f64 = x.row(i).iter().zip(&w).map(|(a, b)| a * b).sum();
                let eps = rng.standard_normal();
                y.push(if noise == 0.0 { clean } else { clean + noise * eps });
            }
            Ok((
                Dataset::from_parts(x, y, Task::Regression)?,
                SyntheticTruth::Weights(w),
            ))
        }
        SyntheticKind::TwoGaussians { separation } => {
            let means = [vec![-separation; d], vec![*separation; d]];
            let mut x = Array2::zeros((n, d));
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let class = rng.below(2) as usize;
                for j in 0..d {
                    x[[i, j]] = means[class][j] + noise * rng.standard_normal();
                }
                y.push(class as f64);
            }
            Ok((
                Dataset::from_parts(x, y, Task::Classification { num_classes: 2 })?,
                SyntheticTruth::ClassMeans(means),
            ))
        }
    }
}

/// Flips the labels of `round(fraction * candidates.len())` rows chosen
/// uniformly from `candidates` (dataset row indices). The returned mask is
/// aligned with `candidates`.
pub fn flip_labels_among(
    ds: &Dataset,
    candidates: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Vec<bool>)> {
    if ds.task != (Task::Classification { num_classes: 2 }) {
        return Err(Error::UnsupportedTask(
            "label flipping needs a binary classification dataset".into(),
        ));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "flip fraction {fraction} outside [0, 1]"
        )));
    }
    let count = (fraction * candidates.len() as f64).round() as usize;
    let chosen = SeededRng::new(seed, Domain::LabelFlip, 0).sample_indices(candidates.len(), count);
    let mut mask = vec![false; candidates.len()];
    for &k in &chosen {
        mask[k] = true;
    }
    let targets = apply_flip_mask(ds.targets(), candidates, &mask);
    Ok((ds.with_targets(targets)?, mask))
}

pub fn flip_labels(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Vec<bool>)> {
    let all: Vec<usize> = (0..ds.len()).collect();
    flip_labels_among(ds, &all, fraction, seed)
}

/// `y -> 1 - y` on the masked candidate rows. Applying it twice is the identity.
pub fn apply_flip_mask(targets: &[f64], candidates: &[usize], mask: &[bool]) -> Vec<f64> {
    let mut out = targets.to_vec();
    for (&row, &flip) in candidates.iter().zip(mask) {
        if flip {
            out[row] = 1.0 - out[row];
        }
    }
    out
}

/// The attributed training subset and the evaluated test instances, as row
/// indices into the train and test datasets respectively.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSubsets {
    pub train_subset: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub subset_seed: u64,
}

impl EvalSubsets {
    /// Draws `l` training and `m` test rows. `m >= n_test` selects every
    /// test row.
    pub fn draw(n_train: usize, n_test: usize, l: usize, m: usize, seed: u64) -> Result<Self> {
        if l < 2 || l > n_train {
            return Err(Error::InvalidArgument(format!(
                "training subset size {l} must be in [2, {n_train}]"
            )));
        }
        if m == 0 {
            return Err(Error::InvalidArgument("need at least one test instance".into()));
        }
        let train_subset = SeededRng::new(seed, Domain::Subset, 0).sample_indices(n_train, l);
        let test_indices = if m >= n_test {
            (0..n_test).collect()
        } else {
            SeededRng::new(seed, Domain::Subset, 1).sample_indices(n_test, m)
        };
        let out = Self {
            train_subset,
            test_indices,
            subset_seed: seed,
        };
        out.validate(n_train, n_test)?;
        Ok(out)
    }

    pub fn validate(&self, n_train: usize, n_test: usize) -> Result<()> {
        if self.train_subset.len() < 2 {
            return Err(Error::InvalidArgument("training subset needs l >= 2".into()));
        }
        check_distinct_in_range(&self.train_subset, n_train, "training subset")?;
        check_distinct_in_range(&self.test_indices, n_test, "test indices")
    }

    pub fn l(&self) -> usize {
        self.train_subset.len()
    }

    pub fn m(&self) -> usize {
        self.test_indices.len()
    }
}

fn check_distinct_in_range(idx: &[usize], n: usize, what: &str) -> Result<()> {
    let set: BTreeSet<usize> = idx.iter().copied().collect();
    if set.len() != idx.len() {
        return Err(Error::InvalidArgument(format!("{what} contains duplicates")));
    }
    if let Some(bad) = idx.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!(
            "{what} index {bad} out of range ({n} rows)"
        )));
    }
    Ok(())
}
