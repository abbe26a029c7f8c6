//! Agreement between approximate and gold attribution vectors, seed-group
//! analysis, and mislabel detection AUC.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attributors::AttributionVector;
use crate::data::csv_io;
use crate::error::{Error, Result};
use crate::goldstd::{adjust_mean_subtract, GoldRunRecord, GoldScores};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Cosine,
    Spearman,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Spearman => "spearman",
        })
    }
}

impl Metric {
    pub fn eval(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Metric::Cosine => cosine_sim(a, b),
            Metric::Spearman => spearman(a, b),
        }
    }
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Undefined("cosine similarity with a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("correlation with a constant vector".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    if a.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs at least two points".into()));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Mean and standard error (sample std with `n - 1`, over `sqrt(n)`); one
/// value has standard error 0.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Checkpoint step, or group size for seed-group curves.
    pub x: usize,
    pub mean: f64,
    pub se: f64,
    /// Similarities that entered the mean.
    pub count: usize,
    /// Undefined similarities left out.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub method: String,
    pub metric: Metric,
    pub points: Vec<CurvePoint>,
}

impl SimilarityCurve {
    pub fn max_mean(&self) -> Option<&CurvePoint> {
        self.points
            .iter()
            .filter(|p| p.mean.is_finite())
            .max_by(|a, b| a.mean.total_cmp(&b.mean))
    }
}

fn summarize(x: usize, sims: Vec<Result<f64>>, context: &str) -> CurvePoint {
    let total = sims.len();
    let values: Vec<f64> = sims.into_iter().filter_map(|s| s.ok()).collect();
    let dropped = total - values.len();
    if dropped > 0 {
        tracing::warn!(dropped, context, x, "undefined similarities left out of the mean");
    }
    let (mean, se) = mean_se(&values);
    CurvePoint {
        x,
        mean,
        se,
        count: values.len(),
        dropped,
    }
}

/// Approximate vectors keyed by test id, reordered to the gold training order.
fn align(gold: &GoldScores, approx: &[AttributionVector]) -> Result<HashMap<u64, Vec<f64>>> {
    let position: HashMap<u64, usize> = gold.train_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let mut out = HashMap::new();
    for v in approx {
        if v.train_ids.len() != gold.train_ids.len() {
            return Err(Error::Alignment(format!(
                "{} has {} training ids, gold has {}",
                v.method,
                v.train_ids.len(),
                gold.train_ids.len()
            )));
        }
        let mut aligned = vec![f64::NAN; gold.train_ids.len()];
        for (id, s) in v.train_ids.iter().zip(&v.scores) {
            let k = position
                .get(id)
                .ok_or_else(|| Error::Alignment(format!("training id {id} not in gold record")))?;
            aligned[*k] = *s;
        }
        if aligned.iter().any(|x| x.is_nan()) {
            return Err(Error::Alignment(format!("{}: duplicate training ids", v.method)));
        }
        out.insert(v.test_id, aligned);
    }
    for id in &gold.test_ids {
        if !out.contains_key(id) {
            return Err(Error::Alignment(format!("no approximate scores for test id {id}")));
        }
    }
    Ok(out)
}

/// Per checkpoint, mean and standard error over test instances of the
/// similarity between gold and approximate vectors.
pub fn similarity_curves(gold: &GoldScores, approx: &[AttributionVector], metric: Metric) -> Result<SimilarityCurve> {
    let aligned = align(gold, approx)?;
    let method = approx.first().map(|v| v.method.clone()).unwrap_or_default();
    let points = gold
        .checkpoints
        .iter()
        .enumerate()
        .map(|(t, &step)| {
            let sims = gold
                .test_ids
                .iter()
                .enumerate()
                .map(|(j, id)| metric.eval(&gold.vector(t, j), &aligned[id]))
                .collect();
            summarize(step, sims, &method)
        })
        .collect();
    Ok(SimilarityCurve { method, metric, points })
}

/// For each group size `r'`, splits the `r` seeds into `r / r'` consecutive
/// groups (a remainder is dropped), recomputes mean-subtract gold per group,
/// pools similarities over groups and test instances per checkpoint, and
/// keeps the checkpoint with the largest mean.
pub fn seed_group_curves(
    rec: &GoldRunRecord,
    approx: &[AttributionVector],
    metric: Metric,
    group_sizes: &[usize],
) -> Result<SimilarityCurve> {
    let r = rec.r();
    let method = approx.first().map(|v| v.method.clone()).unwrap_or_default();
    let mut points = Vec::new();
    for &size in group_sizes {
        if size == 0 || size > r {
            return Err(Error::InvalidArgument(format!(
                "group size {size} must be in [1, {r}]"
            )));
        }
        let groups = r / size;
        if !r.is_multiple_of(size) {
            tracing::info!(size, dropped = r % size, "seed remainder dropped");
        }
        let golds: Vec<GoldScores> = (0..groups)
            .map(|g| adjust_mean_subtract(&rec.select_seeds(&(g * size..(g + 1) * size).collect::<Vec<_>>())))
            .collect();
        let aligned = align(&golds[0], approx)?;
        let per_checkpoint: Vec<CurvePoint> = (0..rec.num_checkpoints())
            .map(|t| {
                let sims = golds
                    .iter()
                    .flat_map(|gold| {
                        gold.test_ids
                            .iter()
                            .enumerate()
                            .map(|(j, id)| metric.eval(&gold.vector(t, j), &aligned[id]))
                            .collect::<Vec<_>>()
                    })
                    .collect();
                summarize(size, sims, &method)
            })
            .collect();
        let best = per_checkpoint
            .into_iter()
            .filter(|p| p.mean.is_finite())
            .max_by(|a, b| a.mean.total_cmp(&b.mean))
            .unwrap_or(CurvePoint {
                x: size,
                mean: f64::NAN,
                se: f64::NAN,
                count: 0,
                dropped: 0,
            });
        points.push(best);
    }
    Ok(SimilarityCurve { method, metric, points })
}

/// Area under the ROC curve of `scores` ranking `positive` instances first,
/// by pairwise counting with ties worth one half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: positive.len(),
        });
    }
    let npos = positive.iter().filter(|&&p| p).count();
    let nneg = positive.len() - npos;
    if npos == 0 || nneg == 0 {
        return Err(Error::Undefined("AUC needs both classes in the mask".into()));
    }
    // Rank-sum form of the pairwise count.
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (npos * (npos + 1)) as f64 / 2.0;
    Ok(u / (npos * nneg) as f64)
}

/// AUC of flipped-label detection at checkpoint `t`. Instances are ranked by
/// the negated gold score averaged over test instances: removing a flipped
/// instance should lower test loss.
pub fn mislabel_auc(gold: &GoldScores, t: usize, flipped: &[bool]) -> Result<f64> {
    if flipped.len() != gold.train_ids.len() {
        return Err(Error::Alignment(format!(
            "flip mask has {} entries, training subset has {}",
            flipped.len(),
            gold.train_ids.len()
        )));
    }
    let m = gold.test_ids.len() as f64;
    let ranker: Vec<f64> = (0..gold.train_ids.len())
        .map(|k| -(0..gold.test_ids.len()).map(|j| gold.scores[[t, j, k]]).sum::<f64>() / m)
        .collect();
    auc(&ranker, flipped)
}

/// Writes curves as CSV with columns method, `x_label`, mean, se, count, dropped.
pub fn write_curves(path: &Path, x_label: &str, curves: &[SimilarityCurve]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["method", x_label, "mean", "se", "count", "dropped"])
        .map_err(|e| csv_io(path, e))?;
    for c in curves {
        for p in &c.points {
            w.write_record([
                c.method.clone(),
                p.x.to_string(),
                p.mean.to_string(),
                p.se.to_string(),
                p.count.to_string(),
                p.dropped.to_string(),
            ])
            .map_err(|e| csv_io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
