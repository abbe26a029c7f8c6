//! Further-training gold standard: leave-one-out sweeps over seeds, the two
//! adjustments, and retraining from scratch for comparison.

use std::fmt;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{csv_io, Dataset, EvalSubsets};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::training::{train_with, TrainEvent, TrainPlan};

/// Identifier written in place of a training id for the all-data run.
pub const FULL_ID: &str = "FULL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Initialized at the final model, run with the further-training plan.
    FurtherTraining,
    /// Initialized at the original initialization, run with the original plan.
    Retraining,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Adjustment {
    #[default]
    MeanSubtract,
    FullSubtract,
}

impl fmt::Display for Adjustment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Adjustment::MeanSubtract => "mean_subtract",
            Adjustment::FullSubtract => "full_subtract",
        })
    }
}

/// Shuffle seed used by every run (FULL and each leave-one-out) of seed `s`.
pub fn run_seed(base: u64, s: u64) -> u64 {
    base.wrapping_add(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldMetadata {
    pub kind: SweepKind,
    pub plan: TrainPlan,
    pub train_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
    pub seeds: Vec<u64>,
    pub checkpoints: Vec<usize>,
}

/// Test evaluations `g(z_j, theta)` at every checkpoint of every run.
/// `loo[[k, s, t, j]]` leaves out training subset entry `k`; `full[[s, t, j]]`
/// trains on all data.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldRunRecord {
    pub meta: GoldMetadata,
    pub loo: Array4<f64>,
    pub full: Array3<f64>,
}

impl GoldRunRecord {
    pub fn l(&self) -> usize {
        self.loo.shape()[0]
    }

    pub fn r(&self) -> usize {
        self.loo.shape()[1]
    }

    pub fn num_checkpoints(&self) -> usize {
        self.loo.shape()[2]
    }

    pub fn m(&self) -> usize {
        self.loo.shape()[3]
    }

    pub fn run_count(&self) -> usize {
        (self.l() + 1) * self.r()
    }

    /// The record restricted to the given seed positions.
    pub fn select_seeds(&self, positions: &[usize]) -> GoldRunRecord {
        let mut meta = self.meta.clone();
        meta.seeds = positions.iter().map(|&s| self.meta.seeds[s]).collect();
        GoldRunRecord {
            meta,
            loo: self.loo.select(Axis(1), positions),
            full: self.full.select(Axis(0), positions),
        }
    }

    /// Writes `<stem>.csv` (columns loo_id, seed, checkpoint, test_id,
    /// g_value) and `<stem>.json` holding the metadata.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_io(&csv_path, e))?;
        w.write_record(["loo_id", "seed", "checkpoint", "test_id", "g_value"])
            .map_err(|e| csv_io(&csv_path, e))?;
        let meta = &self.meta;
        for (s, seed) in meta.seeds.iter().enumerate() {
            for key in std::iter::once(None).chain((0..self.l()).map(Some)) {
                let loo_id = match key {
                    None => FULL_ID.to_string(),
                    Some(k) => meta.train_ids[k].to_string(),
                };
                for (t, step) in meta.checkpoints.iter().enumerate() {
                    for (j, test_id) in meta.test_ids.iter().enumerate() {
                        let v = match key {
                            None => self.full[[s, t, j]],
                            Some(k) => self.loo[[k, s, t, j]],
                        };
                        w.write_record([
                            loo_id.clone(),
                            seed.to_string(),
                            step.to_string(),
                            test_id.to_string(),
                            v.to_string(),
                        ])
                        .map_err(|e| csv_io(&csv_path, e))?;
                    }
                }
            }
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(meta).expect("metadata serializes");
        std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let json_path = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let meta: GoldMetadata = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { row: 0, message: format!("{}: {e}", json_path.display()) })?;
        let (l, r, t, m) = (
            meta.train_ids.len(),
            meta.seeds.len(),
            meta.checkpoints.len(),
            meta.test_ids.len(),
        );
        let index = |ids: &[u64], id: u64, what: &str| {
            ids.iter()
                .position(|&x| x == id)
                .ok_or_else(|| Error::Alignment(format!("unknown {what} {id} in gold record")))
        };
        let mut loo = Array4::from_elem((l, r, t, m), f64::NAN);
        let mut full = Array3::from_elem((r, t, m), f64::NAN);
        let csv_path = dir.join(format!("{stem}.csv"));
        let mut rd = csv::Reader::from_path(&csv_path).map_err(|e| csv_io(&csv_path, e))?;
        for (row, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| csv_io(&csv_path, e))?;
            let bad = |what: &str| Error::Parse {
                row: row + 2,
                message: format!("bad {what} in {}", csv_path.display()),
            };
            if rec.len() != 5 {
                return Err(bad("field count"));
            }
            let seed: u64 = rec[1].parse().map_err(|_| bad("seed"))?;
            let step: usize = rec[2].parse().map_err(|_| bad("checkpoint"))?;
            let test_id: u64 = rec[3].parse().map_err(|_| bad("test_id"))?;
            let value: f64 = rec[4].parse().map_err(|_| bad("g_value"))?;
            let s = index(&meta.seeds, seed, "seed")?;
            let ti = meta
                .checkpoints
                .iter()
                .position(|&c| c == step)
                .ok_or_else(|| Error::Alignment(format!("unknown checkpoint {step}")))?;
            let j = index(&meta.test_ids, test_id, "test id")?;
            if &rec[0] == FULL_ID {
                full[[s, ti, j]] = value;
            } else {
                let id: u64 = rec[0].parse().map_err(|_| bad("loo_id"))?;
                let k = index(&meta.train_ids, id, "training id")?;
                loo[[k, s, ti, j]] = value;
            }
        }
        if loo.iter().chain(full.iter()).any(|v| v.is_nan()) {
            return Err(Error::Alignment("gold record grid is incomplete".into()));
        }
        Ok(Self { meta, loo, full })
    }
}

/// Adjusted, seed-averaged gold scores; `scores[[t, j, k]]` for checkpoint
/// `t`, test instance `j` and training subset entry `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldScores {
    pub adjustment: Adjustment,
    pub train_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
    pub checkpoints: Vec<usize>,
    pub scores: Array3<f64>,
}

impl GoldScores {
    /// Score vector over the training subset for one checkpoint and test position.
    pub fn vector(&self, t: usize, j: usize) -> Vec<f64> {
        self.scores.slice(ndarray::s![t, j, ..]).to_vec()
    }

    pub fn last_checkpoint(&self) -> usize {
        self.checkpoints.len() - 1
    }

    /// One CSV per checkpoint: `<dir>/<adjustment>_step<step>.csv` with
    /// columns test_id, loo_id, score.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for (t, step) in self.checkpoints.iter().enumerate() {
            let path = dir.join(format!("{}_step{step}.csv", self.adjustment));
            let mut w = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
            w.write_record(["test_id", "loo_id", "score"]).map_err(|e| csv_io(&path, e))?;
            for (j, test_id) in self.test_ids.iter().enumerate() {
                for (k, train_id) in self.train_ids.iter().enumerate() {
                    w.write_record([
                        test_id.to_string(),
                        train_id.to_string(),
                        self.scores[[t, j, k]].to_string(),
                    ])
                    .map_err(|e| csv_io(&path, e))?;
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Further training from the final model with plan `plan` over `r` seeds.
pub fn run_gold_sweep(
    final_model: &ModelState,
    train: &Dataset,
    test: &Dataset,
    subsets: &EvalSubsets,
    plan: &TrainPlan,
    r: usize,
) -> Result<GoldRunRecord> {
    sweep(SweepKind::FurtherTraining, final_model, train, test, subsets, plan, r)
}

/// Retraining from the original initialization with the original plan.
pub fn retrain_gold(
    init: &ModelState,
    train: &Dataset,
    test: &Dataset,
    subsets: &EvalSubsets,
    plan: &TrainPlan,
    r: usize,
) -> Result<GoldRunRecord> {
    sweep(SweepKind::Retraining, init, train, test, subsets, plan, r)
}

fn sweep(
    kind: SweepKind,
    start: &ModelState,
    train: &Dataset,
    test: &Dataset,
    subsets: &EvalSubsets,
    plan: &TrainPlan,
    r: usize,
) -> Result<GoldRunRecord> {
    if r == 0 {
        return Err(Error::InvalidArgument("seed count r must be >= 1".into()));
    }
    plan.validate()?;
    subsets.validate(train.len(), test.len())?;
    let l = subsets.l();
    let m = subsets.m();
    let checkpoints = plan.checkpoint_steps(train.len());
    let nt = checkpoints.len();

    // Seeds outer, leave-one-out inner; `None` is the FULL run.
    let tasks: Vec<(usize, Option<usize>)> = (0..r)
        .flat_map(|s| std::iter::once((s, None)).chain((0..l).map(move |k| (s, Some(k)))))
        .collect();
    tracing::info!(runs = tasks.len(), ?kind, "starting gold sweep");

    let results: Vec<Array2<f64>> = tasks
        .par_iter()
        .map(|&(s, key)| {
            let run_plan = TrainPlan {
                shuffle_seed: run_seed(plan.shuffle_seed, s as u64),
                ..plan.clone()
            };
            let loo = key.map(|k| subsets.train_subset[k]);
            let mut values = Array2::zeros((nt, m));
            let mut t = 0;
            train_with(start, train, &run_plan, loo, |event| {
                if let TrainEvent::Checkpoint { model, .. } = event {
                    let g = model.losses(test, &subsets.test_indices)?;
                    values.row_mut(t).assign(&ndarray::Array1::from(g));
                    t += 1;
                }
                Ok(())
            })
            .map_err(|e| match e {
                Error::Diverged { step } => Error::RunDiverged {
                    loo: key
                        .map(|k| train.ids()[subsets.train_subset[k]].to_string())
                        .unwrap_or_else(|| FULL_ID.to_string()),
                    seed: s as u64,
                    step,
                },
                other => other,
            })?;
            debug_assert_eq!(t, nt);
            Ok(values)
        })
        .collect::<Result<_>>()?;

    let mut loo = Array4::zeros((l, r, nt, m));
    let mut full = Array3::zeros((r, nt, m));
    for (&(s, key), values) in tasks.iter().zip(results) {
        match key {
            None => full.index_axis_mut(Axis(0), s).assign(&values),
            Some(k) => loo
                .index_axis_mut(Axis(0), k)
                .index_axis_mut(Axis(0), s)
                .assign(&values),
        }
    }
    Ok(GoldRunRecord {
        meta: GoldMetadata {
            kind,
            plan: plan.clone(),
            train_ids: subsets.train_subset.iter().map(|&i| train.ids()[i]).collect(),
            test_ids: subsets.test_indices.iter().map(|&j| test.ids()[j]).collect(),
            seeds: (0..r as u64).collect(),
            checkpoints,
        },
        loo,
        full,
    })
}

/// `a_k = (1/r) sum_s [g(D_-k, s) - (1/l) sum_k' g(D_-k', s)]`.
pub fn adjust_mean_subtract(rec: &GoldRunRecord) -> GoldScores {
    let (l, r, nt, m) = rec.loo.dim();
    let mut scores = Array3::zeros((nt, m, l));
    for t in 0..nt {
        for j in 0..m {
            let mut acc = vec![0.0; l];
            for s in 0..r {
                let mean = (0..l).map(|k| rec.loo[[k, s, t, j]]).sum::<f64>() / l as f64;
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += rec.loo[[k, s, t, j]] - mean;
                }
            }
            // Averaging is exact up to rounding; recentering removes the
            // residual drift carried over from the raw evaluation scale.
            acc.iter_mut().for_each(|a| *a /= r as f64);
            let drift = acc.iter().sum::<f64>() / l as f64;
            for (k, a) in acc.iter().enumerate() {
                scores[[t, j, k]] = a - drift;
            }
        }
    }
    gold_scores(rec, Adjustment::MeanSubtract, scores)
}

/// `v_k = (1/r) sum_s [g(D_-k, s) - g(D, s)]`.
pub fn adjust_full_subtract(rec: &GoldRunRecord) -> GoldScores {
    let (l, r, nt, m) = rec.loo.dim();
    let mut scores = Array3::zeros((nt, m, l));
    for t in 0..nt {
        for j in 0..m {
            for k in 0..l {
                let sum: f64 = (0..r).map(|s| rec.loo[[k, s, t, j]] - rec.full[[s, t, j]]).sum();
                scores[[t, j, k]] = sum / r as f64;
            }
        }
    }
    gold_scores(rec, Adjustment::FullSubtract, scores)
}

pub fn adjust(rec: &GoldRunRecord, adjustment: Adjustment) -> GoldScores {
    match adjustment {
        Adjustment::MeanSubtract => adjust_mean_subtract(rec),
        Adjustment::FullSubtract => adjust_full_subtract(rec),
    }
}

fn gold_scores(rec: &GoldRunRecord, adjustment: Adjustment, scores: Array3<f64>) -> GoldScores {
    GoldScores {
        adjustment,
        train_ids: rec.meta.train_ids.clone(),
        test_ids: rec.meta.test_ids.clone(),
        checkpoints: rec.meta.checkpoints.clone(),
        scores,
    }
}
