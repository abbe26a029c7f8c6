//! Config-driven commands. Output layout under `RunConfig::output`:
//!
//! ```text
//! models/        init.model, final.model, train_log.csv
//! gold/          record.csv + record.json, scores/<adjustment>_step<k>.csv,
//!                retrain/ (same layout, when enabled)
//! attributions/  <method>.csv + <method>.json, status.csv
//! reports/       curves_<metric>.csv, seed_groups_<metric>.csv, *.svg,
//!                topk.csv, flip_mask.csv and mislabel_auc.csv (with flips)
//! ```

use std::path::{Path, PathBuf};

use crate::attributors::{attribute, AttributionProblem, AttributionVector, MethodOutput};
use crate::config::{DataSource, RunConfig};
use crate::data::{self, csv_io, Dataset, EvalSubsets};
use crate::error::{Error, Result};
use crate::eval::{self, SimilarityCurve};
use crate::goldstd::{self, Adjustment, GoldRunRecord};
use crate::model::{Architecture, ModelState};
use crate::report;
use crate::training::{train_with, TrainEvent};

const RECORD_STEM: &str = "record";

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn init_model(&self) -> PathBuf {
        self.models().join("init.model")
    }

    pub fn final_model(&self) -> PathBuf {
        self.models().join("final.model")
    }

    pub fn gold(&self) -> PathBuf {
        self.root.join("gold")
    }

    pub fn retrain(&self) -> PathBuf {
        self.gold().join("retrain")
    }

    pub fn attributions(&self) -> PathBuf {
        self.root.join("attributions")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Datasets after splitting, standardization (train statistics) and
/// optional label flipping, plus the evaluation subsets.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub subsets: EvalSubsets,
    /// Aligned with `subsets.train_subset` when labels were flipped.
    pub flip_mask: Option<Vec<bool>>,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let full = match &cfg.dataset.source {
        DataSource::Csv { path, .. } => {
            let schema = cfg.dataset.source.csv_schema().expect("csv source");
            data::load_csv(path, &schema)?
        }
        DataSource::Synthetic {
            generator,
            n,
            d,
            noise,
            seed,
        } => data::make_synthetic(generator, *n, *d, *noise, *seed)?.0,
    };
    let idx = data::split_indices(full.len(), &cfg.split.spec())?;
    let full = if cfg.dataset.standardize {
        data::standardize(&full, &idx.train)?.0
    } else {
        full
    };
    let mut train = full.subset(&idx.train);
    let test = full.subset(&idx.test);
    let subsets = EvalSubsets::draw(train.len(), test.len(), cfg.subsets.l, cfg.subsets.m, cfg.subsets.seed)?;
    let mut flip_mask = None;
    if let Some(fraction) = cfg.dataset.mislabel_fraction {
        let (flipped, mask) = data::flip_labels_among(&train, &subsets.train_subset, fraction, cfg.subsets.seed)?;
        train = flipped;
        flip_mask = Some(mask);
    }
    Ok(PreparedData {
        train,
        test,
        subsets,
        flip_mask,
    })
}

pub fn architecture(cfg: &RunConfig, data: &PreparedData) -> Architecture {
    Architecture::mlp(data.train.dim(), &cfg.model.hidden, data.train.task()).with_activation(cfg.model.activation)
}

fn load_model(cfg: &RunConfig, data: &PreparedData, path: &Path) -> Result<ModelState> {
    let model = ModelState::read(path)?;
    if *model.arch() != architecture(cfg, data) {
        return Err(Error::Config(format!(
            "model {} does not match the configured architecture",
            path.display()
        )));
    }
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub model_path: PathBuf,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let layout = Layout::new(&cfg.output);
    mkdir(&layout.models())?;
    let init = ModelState::init(architecture(cfg, &data), cfg.model.init_seed)?;
    init.write(&layout.init_model())?;
    let rows: Vec<usize> = (0..data.train.len()).collect();
    let mean_loss = |m: &ModelState| -> Result<f64> {
        let l = m.losses(&data.train, &rows)?;
        Ok(l.iter().sum::<f64>() / l.len() as f64)
    };
    let mut epoch_losses = Vec::new();
    let model = train_with(&init, &data.train, &cfg.train, None, |event| {
        if let TrainEvent::EpochEnd { epoch, model } = event {
            let loss = mean_loss(model)?;
            tracing::info!(epoch, loss, "epoch done");
            epoch_losses.push(loss);
        }
        Ok(())
    })?;
    let final_loss = mean_loss(&model)?;
    model.write(&layout.final_model())?;

    let log = layout.models().join("train_log.csv");
    let mut w = csv::Writer::from_path(&log).map_err(|e| csv_io(&log, e))?;
    w.write_record(["epoch", "mean_loss"]).map_err(|e| csv_io(&log, e))?;
    for (e, l) in epoch_losses.iter().enumerate() {
        w.write_record([(e + 1).to_string(), l.to_string()])
            .map_err(|e| csv_io(&log, e))?;
    }
    w.flush().map_err(|e| Error::io(&log, e))?;
    Ok(TrainSummary {
        model_path: layout.final_model(),
        epoch_losses,
        final_loss,
    })
}

#[derive(Debug, Clone)]
pub struct GoldSummary {
    /// Training runs in the further-training sweep, `(l + 1) * r`.
    pub runs: usize,
    pub retrain_runs: usize,
    pub score_files: Vec<PathBuf>,
}

fn write_gold(rec: &GoldRunRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    rec.write(dir, RECORD_STEM)?;
    let mut files = Vec::new();
    for adj in [Adjustment::MeanSubtract, Adjustment::FullSubtract] {
        files.extend(goldstd::adjust(rec, adj).write(&dir.join("scores"))?);
    }
    Ok(files)
}

/// `model` defaults to `models/final.model` under the output directory.
pub fn cmd_gold(cfg: &RunConfig, model: Option<&Path>) -> Result<GoldSummary> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let layout = Layout::new(&cfg.output);
    let model_path = model.map(Path::to_path_buf).unwrap_or_else(|| layout.final_model());
    let final_model = load_model(cfg, &data, &model_path)?;
    let r = cfg.gold.seed_count;
    let rec = goldstd::run_gold_sweep(&final_model, &data.train, &data.test, &data.subsets, &cfg.further_plan(), r)?;
    let mut score_files = write_gold(&rec, &layout.gold())?;
    let mut retrain_runs = 0;
    if cfg.gold.retrain {
        let init = ModelState::init(architecture(cfg, &data), cfg.model.init_seed)?;
        let rt = goldstd::retrain_gold(&init, &data.train, &data.test, &data.subsets, &cfg.train, r)?;
        retrain_runs = rt.run_count();
        score_files.extend(write_gold(&rt, &layout.retrain())?);
    }
    Ok(GoldSummary {
        runs: rec.run_count(),
        retrain_runs,
        score_files,
    })
}

#[derive(Debug)]
pub struct AttributeSummary {
    pub written: Vec<String>,
    pub failures: Vec<(String, Error)>,
}

impl AttributeSummary {
    /// The error to report when any method failed: numerical if any
    /// failure was numerical.
    pub fn into_result(self) -> Result<Vec<String>> {
        if self.failures.is_empty() {
            return Ok(self.written);
        }
        let numerical = self.failures.iter().any(|(_, e)| e.is_numerical());
        let msg = self
            .failures
            .iter()
            .map(|(m, e)| format!("{m}: {e}"))
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::MethodsFailed { numerical, message: msg })
    }
}

/// Runs every configured method. A failing method is recorded in
/// `status.csv` and the others still run.
pub fn cmd_attribute(cfg: &RunConfig, model: Option<&Path>) -> Result<AttributeSummary> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let layout = Layout::new(&cfg.output);
    let model_path = model.map(Path::to_path_buf).unwrap_or_else(|| layout.final_model());
    let final_model = load_model(cfg, &data, &model_path)?;
    let dir = layout.attributions();
    mkdir(&dir)?;
    let problem = AttributionProblem::new(&final_model, &data.train, &data.subsets.train_subset)?;
    let mut summary = AttributeSummary {
        written: Vec::new(),
        failures: Vec::new(),
    };
    let status_path = dir.join("status.csv");
    let mut status = csv::Writer::from_path(&status_path).map_err(|e| csv_io(&status_path, e))?;
    status
        .write_record(["method", "status", "message"])
        .map_err(|e| csv_io(&status_path, e))?;
    for spec in &cfg.attributors {
        let label = spec.label();
        tracing::info!(method = %label, "attributing");
        match attribute(&problem, spec, &data.test, &data.subsets.test_indices) {
            Ok(out) => {
                out.write(&dir)?;
                status
                    .write_record([label.as_str(), "ok", ""])
                    .map_err(|e| csv_io(&status_path, e))?;
                summary.written.push(label);
            }
            Err(e) => {
                tracing::error!(method = %label, error = %e, "method failed");
                for ext in ["csv", "json"] {
                    let stale = dir.join(format!("{label}.{ext}"));
                    if stale.exists() {
                        std::fs::remove_file(&stale).map_err(|err| Error::io(&stale, err))?;
                    }
                }
                status
                    .write_record([label.as_str(), "failed", &e.to_string()])
                    .map_err(|e| csv_io(&status_path, e))?;
                summary.failures.push((label, e));
            }
        }
    }
    status.flush().map_err(|e| Error::io(&status_path, e))?;
    Ok(summary)
}

/// Attribution vectors of one method as written by [`cmd_attribute`].
pub fn read_attributions(path: &Path) -> Result<Vec<AttributionVector>> {
    let (method, rows) = MethodOutput::read_scores(path)?;
    Ok(rows
        .into_iter()
        .map(|(test_id, train_ids, scores)| AttributionVector {
            method: method.clone(),
            test_id,
            train_ids,
            scores,
            solver: None,
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub curves: Vec<SimilarityCurve>,
    pub seed_groups: Vec<SimilarityCurve>,
    pub retrain_curves: Vec<SimilarityCurve>,
    /// `(checkpoint step, AUC)` when labels were flipped.
    pub mislabel_auc: Vec<(usize, f64)>,
    pub missing_methods: Vec<String>,
}

pub fn cmd_report(cfg: &RunConfig) -> Result<ReportSummary> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output);
    let rec = GoldRunRecord::read(&layout.gold(), RECORD_STEM)?;
    let gold = goldstd::adjust(&rec, cfg.gold.adjustment);
    let dir = layout.reports();
    mkdir(&dir)?;
    let metric = cfg.report.metric;

    let mut methods = Vec::new();
    let mut missing_methods = Vec::new();
    for spec in &cfg.attributors {
        let label = spec.label();
        let path = layout.attributions().join(format!("{label}.csv"));
        if path.is_file() {
            methods.push(read_attributions(&path)?);
        } else {
            tracing::warn!(method = %label, "no attribution file, skipping");
            missing_methods.push(label);
        }
    }

    let curves = methods
        .iter()
        .map(|v| eval::similarity_curves(&gold, v, metric))
        .collect::<Result<Vec<_>>>()?;
    let sizes = cfg.report.group_sizes_for(rec.r());
    let seed_groups = methods
        .iter()
        .map(|v| eval::seed_group_curves(&rec, v, metric, &sizes))
        .collect::<Result<Vec<_>>>()?;
    let curves_csv = dir.join(format!("curves_{metric}.csv"));
    eval::write_curves(&curves_csv, "checkpoint", &curves)?;
    eval::write_curves(&dir.join(format!("seed_groups_{metric}.csv")), "group_size", &seed_groups)?;
    if cfg.report.svg {
        report::write_svg(
            &dir.join(format!("curves_{metric}.svg")),
            &report::curves_svg("Similarity to further-training gold", "step", &metric.to_string(), &curves),
        )?;
        report::write_svg(
            &dir.join(format!("seed_groups_{metric}.svg")),
            &report::curves_svg("Max similarity by seed group size", "seeds per group", &metric.to_string(), &seed_groups),
        )?;
    }

    let mut retrain_curves = Vec::new();
    if layout.retrain().join(format!("{RECORD_STEM}.csv")).is_file() {
        let rt = goldstd::adjust(&GoldRunRecord::read(&layout.retrain(), RECORD_STEM)?, cfg.gold.adjustment);
        retrain_curves = methods
            .iter()
            .map(|v| eval::similarity_curves(&rt, v, metric))
            .collect::<Result<Vec<_>>>()?;
        eval::write_curves(&dir.join(format!("retrain_curves_{metric}.csv")), "checkpoint", &retrain_curves)?;
    }

    report::write_top_k(
        &dir.join("topk.csv"),
        &report::top_k(&gold, gold.last_checkpoint(), cfg.report.top_k),
    )?;

    let mut mislabel = Vec::new();
    let data = prepare_data(cfg)?;
    if let Some(mask) = &data.flip_mask {
        let ids: Vec<u64> = data.subsets.train_subset.iter().map(|&i| data.train.ids()[i]).collect();
        if ids != gold.train_ids {
            return Err(Error::Alignment("gold record does not match the configured subset".into()));
        }
        let path = dir.join("flip_mask.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
        w.write_record(["loo_id", "flipped"]).map_err(|e| csv_io(&path, e))?;
        for (id, f) in ids.iter().zip(mask) {
            w.write_record([id.to_string(), u8::from(*f).to_string()])
                .map_err(|e| csv_io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("mislabel_auc.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
        w.write_record(["checkpoint", "auc"]).map_err(|e| csv_io(&path, e))?;
        for (t, &step) in gold.checkpoints.iter().enumerate() {
            let a = eval::mislabel_auc(&gold, t, mask)?;
            w.write_record([step.to_string(), a.to_string()])
                .map_err(|e| csv_io(&path, e))?;
            mislabel.push((step, a));
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }

    Ok(ReportSummary {
        curves,
        seed_groups,
        retrain_curves,
        mislabel_auc: mislabel,
        missing_methods,
    })
}

#[derive(Debug)]
pub struct AllSummary {
    pub train: TrainSummary,
    pub gold: GoldSummary,
    pub attribute: AttributeSummary,
    pub report: ReportSummary,
}

/// train, gold, attribute and report in sequence. Method failures do not
/// stop the report; check `attribute.failures`.
pub fn cmd_all(cfg: &RunConfig) -> Result<AllSummary> {
    let train = cmd_train(cfg)?;
    let gold = cmd_gold(cfg, None)?;
    let attribute = cmd_attribute(cfg, None)?;
    let report = cmd_report(cfg)?;
    Ok(AllSummary {
        train,
        gold,
        attribute,
        report,
    })
}
