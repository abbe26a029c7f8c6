//! Gradient-based approximations of further-training attribution. Every
//! method maps the final model, the attributed training subset and a test
//! instance to one score per subset entry; positive scores mean removing the
//! instance is predicted to raise the test loss.

use std::fmt;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{csv_io, Dataset};
use crate::error::{Error, Result};
use crate::model::{GaussNewtonContext, ModelState};
use crate::rng::{Domain, SeededRng};
use crate::solvers::{self, cg_solve, lissa_auto, CurvatureOp, SolverReport, DEFAULT_DAMPING, LISSA_DEPTH};

pub const DEFAULT_DATAINF_CONST: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curvature {
    TrueHessian,
    GaussNewton,
    /// `H = 0`; the damped system is `lambda I`.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Cg,
    Lissa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub lissa_depth: usize,
    pub lissa_scales: Vec<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kind: SolverKind::Cg,
            cg_tol: 1e-8,
            cg_max_iter: 2000,
            lissa_depth: LISSA_DEPTH,
            lissa_scales: solvers::LISSA_SCALES.to_vec(),
        }
    }
}

impl SolverConfig {
    pub fn cg() -> Self {
        Self::default()
    }

    pub fn lissa() -> Self {
        Self {
            kind: SolverKind::Lissa,
            ..Self::default()
        }
    }

    /// Solves `(H + lambda I) x = b`; divergence becomes an error carrying the report.
    pub fn solve(&self, op: &CurvatureOp<'_>, b: &[f64]) -> Result<SolverReport> {
        let report = match self.kind {
            SolverKind::Cg => cg_solve(op, b, self.cg_tol, self.cg_max_iter)?,
            SolverKind::Lissa => lissa_auto(op, b, self.lissa_depth, &self.lissa_scales)?,
        };
        if report.converged || report.diverged {
            report.into_result()
        } else {
            tracing::warn!(
                iterations = report.iterations,
                residual = report.residual_norm,
                "solver stopped before reaching tolerance"
            );
            Ok(report)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneralizedVariant {
    /// Adds `Hess L(z_i) * dtheta(D)` to each training gradient.
    ExactHessianTerm,
    /// Evaluates each training gradient at `theta_f + dtheta(D)`.
    NearStationary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GramSet {
    /// Features of the attributed subset only.
    #[default]
    Subset,
    /// Features of every training instance.
    Full,
}

fn default_damping() -> f64 {
    DEFAULT_DAMPING
}

fn default_true() -> bool {
    true
}

fn default_datainf_const() -> f64 {
    DEFAULT_DATAINF_CONST
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttributorSpec {
    GradDot {
        #[serde(default = "default_damping")]
        damping: f64,
    },
    GradCos,
    Influence {
        curvature: Curvature,
        #[serde(default = "default_damping")]
        damping: f64,
        #[serde(default)]
        solver: SolverConfig,
    },
    GeneralizedInfluence {
        variant: GeneralizedVariant,
        #[serde(default = "default_damping")]
        damping: f64,
        #[serde(default)]
        solver: SolverConfig,
    },
    TrakM1 {
        projection_dim: usize,
        #[serde(default)]
        projection_seed: u64,
        #[serde(default)]
        gram_set: GramSet,
        #[serde(default = "default_true")]
        pseudo_inverse: bool,
    },
    #[serde(rename = "datainf")]
    DataInf {
        #[serde(default = "default_datainf_const")]
        lambda_const: f64,
    },
}

impl AttributorSpec {
    /// Short unique tag used in file names and curve legends.
    pub fn label(&self) -> String {
        let solver = |s: &SolverConfig| match s.kind {
            SolverKind::Cg => "cg",
            SolverKind::Lissa => "lissa",
        };
        match self {
            AttributorSpec::GradDot { .. } => "grad_dot".into(),
            AttributorSpec::GradCos => "grad_cos".into(),
            AttributorSpec::Influence { curvature, solver: s, .. } => {
                let c = match curvature {
                    Curvature::TrueHessian => "h",
                    Curvature::GaussNewton => "gn",
                    Curvature::Zero => "zero",
                };
                format!("influence_{}_{c}", solver(s))
            }
            AttributorSpec::GeneralizedInfluence { variant, solver: s, .. } => {
                let v = match variant {
                    GeneralizedVariant::ExactHessianTerm => "exact",
                    GeneralizedVariant::NearStationary => "nearstat",
                };
                format!("generalized_{v}_{}", solver(s))
            }
            AttributorSpec::TrakM1 {
                projection_dim,
                projection_seed,
                ..
            } => format!("trak_m1_k{projection_dim}_s{projection_seed}"),
            AttributorSpec::DataInf { .. } => "datainf".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be > 0, got {v}")))
            }
        };
        match self {
            AttributorSpec::GradDot { damping }
            | AttributorSpec::Influence { damping, .. }
            | AttributorSpec::GeneralizedInfluence { damping, .. } => positive("damping", *damping),
            AttributorSpec::GradCos => Ok(()),
            AttributorSpec::TrakM1 { projection_dim, .. } => {
                if *projection_dim == 0 {
                    Err(Error::InvalidArgument("projection_dim must be >= 1".into()))
                } else {
                    Ok(())
                }
            }
            AttributorSpec::DataInf { lambda_const } => positive("lambda_const", *lambda_const),
        }
    }
}

impl fmt::Display for AttributorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Condensed solver outcome kept alongside scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub iterations: usize,
    pub residual_norm: f64,
    pub converged: bool,
    pub scale: Option<f64>,
}

impl From<&SolverReport> for SolverSummary {
    fn from(r: &SolverReport) -> Self {
        Self {
            iterations: r.iterations,
            residual_norm: r.residual_norm,
            converged: r.converged,
            scale: r.scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionVector {
    pub method: String,
    pub test_id: u64,
    pub train_ids: Vec<u64>,
    pub scores: Vec<f64>,
    pub solver: Option<SolverSummary>,
}

/// `(test_id, loo ids, scores)` as read back from a method CSV.
pub type ScoreRows = (u64, Vec<u64>, Vec<f64>);

/// All vectors of one method over the evaluated test instances, plus the
/// hyperparameters and derived quantities used.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutput {
    pub spec: AttributorSpec,
    pub vectors: Vec<AttributionVector>,
    pub details: serde_json::Value,
}

impl MethodOutput {
    pub fn label(&self) -> String {
        self.spec.label()
    }

    /// Writes `<label>.csv` (method, test_id, loo_id, score) and
    /// `<label>.json` with hyperparameters and solver summaries.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let label = self.label();
        let path = dir.join(format!("{label}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
        w.write_record(["method", "test_id", "loo_id", "score"])
            .map_err(|e| csv_io(&path, e))?;
        for v in &self.vectors {
            for (id, score) in v.train_ids.iter().zip(&v.scores) {
                w.write_record([label.clone(), v.test_id.to_string(), id.to_string(), score.to_string()])
                    .map_err(|e| csv_io(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let solvers: Vec<_> = self
            .vectors
            .iter()
            .filter_map(|v| v.solver.as_ref().map(|s| (v.test_id, s)))
            .map(|(id, s)| serde_json::json!({ "test_id": id, "report": s }))
            .collect();
        let sidecar = serde_json::json!({
            "method": label,
            "hyperparameters": self.spec,
            "details": self.details,
            "solver": solvers,
        });
        let json_path = dir.join(format!("{label}.json"));
        std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar).expect("json") + "\n")
            .map_err(|e| Error::io(&json_path, e))
    }

    /// Reads a method CSV back as the method name and, per test id, the
    /// loo ids and scores.
    pub fn read_scores(path: &Path) -> Result<(String, Vec<ScoreRows>)> {
        let mut rd = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut method = String::new();
        let mut out: Vec<ScoreRows> = Vec::new();
        for (row, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| csv_io(path, e))?;
            let bad = |what: &str| Error::Parse {
                row: row + 2,
                message: format!("bad {what} in {}", path.display()),
            };
            if rec.len() != 4 {
                return Err(bad("field count"));
            }
            method = rec[0].to_string();
            let test_id: u64 = rec[1].parse().map_err(|_| bad("test_id"))?;
            let loo_id: u64 = rec[2].parse().map_err(|_| bad("loo_id"))?;
            let score: f64 = rec[3].parse().map_err(|_| bad("score"))?;
            match out.last_mut() {
                Some(last) if last.0 == test_id => {
                    last.1.push(loo_id);
                    last.2.push(score);
                }
                _ => out.push((test_id, vec![loo_id], vec![score])),
            }
        }
        Ok((method, out))
    }
}

/// The fixed inputs shared by every method: final model, full training
/// set (the risk is summed over it) and the attributed subset rows.
#[derive(Clone, Copy)]
pub struct AttributionProblem<'a> {
    pub model: &'a ModelState,
    pub train: &'a Dataset,
    pub subset: &'a [usize],
}

impl<'a> AttributionProblem<'a> {
    pub fn new(model: &'a ModelState, train: &'a Dataset, subset: &'a [usize]) -> Result<Self> {
        if subset.is_empty() {
            return Err(Error::InvalidArgument("empty training subset".into()));
        }
        if let Some(&bad) = subset.iter().find(|&&i| i >= train.len()) {
            return Err(Error::InvalidArgument(format!("subset index {bad} out of range")));
        }
        Ok(Self { model, train, subset })
    }

    pub fn train_ids(&self) -> Vec<u64> {
        self.subset.iter().map(|&i| self.train.ids()[i]).collect()
    }

    fn all_rows(&self) -> Vec<usize> {
        (0..self.train.len()).collect()
    }

    /// `l x p` matrix of training loss gradients over the subset.
    pub fn subset_grads(&self) -> Result<Array2<f64>> {
        self.model.per_example_grads(self.train, self.subset)
    }
}

/// Runs one configured method over `test_rows` of `test`.
pub fn attribute(
    problem: &AttributionProblem<'_>,
    spec: &AttributorSpec,
    test: &Dataset,
    test_rows: &[usize],
) -> Result<MethodOutput> {
    spec.validate()?;
    let test_grads = problem.model.per_example_grads(test, test_rows)?;
    let test_ids: Vec<u64> = test_rows.iter().map(|&j| test.ids()[j]).collect();
    let label = spec.label();
    let mut details = serde_json::Value::Null;

    let scored: Vec<(Vec<f64>, Option<SolverReport>)> = match spec {
        AttributorSpec::GradDot { damping } => {
            let g = problem.subset_grads()?;
            map_tests(&test_grads, |tg| Ok((grad_dot_scores(&g, tg, *damping), None)))?
        }
        AttributorSpec::GradCos => {
            let g = problem.subset_grads()?;
            map_tests(&test_grads, |tg| Ok((grad_cos_scores(&g, tg)?, None)))?
        }
        AttributorSpec::Influence {
            curvature,
            damping,
            solver,
        } => {
            let rows = problem.all_rows();
            let g = problem.subset_grads()?;
            let ctx;
            let op = match curvature {
                Curvature::TrueHessian => CurvatureOp::hessian(problem.model, problem.train, &rows, *damping),
                Curvature::GaussNewton => {
                    ctx = GaussNewtonContext::build(problem.model, problem.train, &rows)?;
                    CurvatureOp::gauss_newton(&ctx, *damping)
                }
                Curvature::Zero => CurvatureOp::zero(problem.model.param_count(), *damping),
            };
            map_tests(&test_grads, |tg| {
                influence_scores(&op, solver, tg, &g).map(|(s, r)| (s, Some(r)))
            })?
        }
        AttributorSpec::GeneralizedInfluence {
            variant,
            damping,
            solver,
        } => {
            let rows = problem.all_rows();
            let op = CurvatureOp::hessian(problem.model, problem.train, &rows, *damping);
            let quad = taylor_expand_objective(problem.model, problem.train, &rows, *damping, 2)?;
            let step = quad.newton_step(solver)?;
            let vectors = generalized_train_vectors(problem, *variant, &step.solution)?;
            details = serde_json::json!({
                "full_step_norm": solvers::norm(&step.solution),
                "full_step_solver": SolverSummary::from(&step),
            });
            map_tests(&test_grads, |tg| {
                influence_scores(&op, solver, tg, &vectors).map(|(s, r)| (s, Some(r)))
            })?
        }
        AttributorSpec::TrakM1 {
            projection_dim,
            projection_seed,
            gram_set,
            pseudo_inverse,
        } => {
            let p = problem.model.param_count();
            if *projection_dim > p {
                return Err(Error::InvalidArgument(format!(
                    "projection_dim {projection_dim} exceeds parameter count {p}"
                )));
            }
            let proj = gaussian_projection(p, *projection_dim, *projection_seed);
            let trak = TrakFeatures::build(problem, &proj, *gram_set, *pseudo_inverse)?;
            details = serde_json::json!({ "gram_rank": trak.rank, "gram_rows": trak.gram_rows });
            map_tests(&test_grads, |tg| Ok((trak.scores(tg), None)))?
        }
        AttributorSpec::DataInf { lambda_const } => {
            let di = DataInfState::build(problem, *lambda_const)?;
            details = serde_json::json!({ "layer_damping": di.layers.iter().map(|l| l.damping).collect::<Vec<_>>() });
            map_tests(&test_grads, |tg| Ok((di.scores(tg), None)))?
        }
    };

    let train_ids = problem.train_ids();
    let vectors = scored
        .into_iter()
        .zip(test_ids)
        .map(|((scores, report), test_id)| {
            if scores.iter().any(|s| !s.is_finite()) {
                return Err(Error::Undefined(format!("{label}: non-finite score for test {test_id}")));
            }
            Ok(AttributionVector {
                method: label.clone(),
                test_id,
                train_ids: train_ids.clone(),
                scores,
                solver: report.as_ref().map(SolverSummary::from),
            })
        })
        .collect::<Result<_>>()?;
    Ok(MethodOutput {
        spec: spec.clone(),
        vectors,
        details,
    })
}

fn map_tests<F>(test_grads: &Array2<f64>, f: F) -> Result<Vec<(Vec<f64>, Option<SolverReport>)>>
where
    F: Fn(&[f64]) -> Result<(Vec<f64>, Option<SolverReport>)> + Sync,
{
    (0..test_grads.nrows())
        .into_par_iter()
        .map(|j| f(&test_grads.row(j).to_vec()))
        .collect()
}

/// `grads * test_grad / lambda`.
pub fn grad_dot_scores(train_grads: &Array2<f64>, test_grad: &[f64], damping: f64) -> Vec<f64> {
    let tg = ArrayView1::from(test_grad);
    train_grads.dot(&tg).iter().map(|v| v / damping).collect()
}

/// Cosine between the test gradient and each training gradient; zero
/// training gradients score 0.
pub fn grad_cos_scores(train_grads: &Array2<f64>, test_grad: &[f64]) -> Result<Vec<f64>> {
    let tg = ArrayView1::from(test_grad);
    let tn = tg.dot(&tg).sqrt();
    if tn == 0.0 {
        return Err(Error::Undefined("zero test gradient has no direction".into()));
    }
    Ok(train_grads
        .outer_iter()
        .map(|row| {
            let rn = row.dot(&row).sqrt();
            if rn == 0.0 {
                0.0
            } else {
                (row.dot(&tg) / (rn * tn)).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

/// One damped solve against the test gradient, then inner products with
/// each training vector (the operator is symmetric).
pub fn influence_scores(
    op: &CurvatureOp<'_>,
    solver: &SolverConfig,
    test_grad: &[f64],
    train_vectors: &Array2<f64>,
) -> Result<(Vec<f64>, SolverReport)> {
    let report = solver.solve(op, test_grad)?;
    let x = ArrayView1::from(&report.solution[..]);
    let scores = train_vectors.dot(&x).to_vec();
    Ok((scores, report))
}

/// Training-side vectors for the generalized influence function given the
/// full-data step `dtheta`.
pub fn generalized_train_vectors(
    problem: &AttributionProblem<'_>,
    variant: GeneralizedVariant,
    dtheta: &[f64],
) -> Result<Array2<f64>> {
    match variant {
        GeneralizedVariant::ExactHessianTerm => {
            let mut g = problem.subset_grads()?;
            for (k, &i) in problem.subset.iter().enumerate() {
                let hv = problem.model.hvp(problem.train, &[i], &[1.0], dtheta)?;
                g.row_mut(k).zip_mut_with(&Array1::from(hv), |a, b| *a += b);
            }
            Ok(g)
        }
        GeneralizedVariant::NearStationary => {
            let shifted = problem.model.shifted(dtheta, 1.0)?;
            shifted.per_example_grads(problem.train, problem.subset)
        }
    }
}

/// Local expansion of the damped objective around the current parameters.
pub struct QuadraticModel<'a> {
    /// `grad R(D')` at the expansion point.
    pub gradient: Vec<f64>,
    pub damping: f64,
    /// Present for second-order expansions.
    pub curvature: Option<CurvatureOp<'a>>,
}

impl QuadraticModel<'_> {
    /// Minimizer of the first-order expansion, `-grad / lambda`.
    pub fn order1_minimizer(&self) -> Vec<f64> {
        self.gradient.iter().map(|g| -g / self.damping).collect()
    }

    /// Damped Newton step `-(H + lambda I)^-1 grad`; falls back to the
    /// first-order minimizer for first-order expansions.
    pub fn newton_step(&self, solver: &SolverConfig) -> Result<SolverReport> {
        match &self.curvature {
            None => Ok(SolverReport {
                solution: self.order1_minimizer(),
                iterations: 0,
                residual_norm: 0.0,
                converged: true,
                diverged: false,
                scale: None,
            }),
            Some(op) => {
                let mut report = solver.solve(op, &self.gradient)?;
                report.solution.iter_mut().for_each(|x| *x = -*x);
                Ok(report)
            }
        }
    }
}

/// Expansion of `R(D'; theta_f + d) + lambda/2 ||d||^2` in `d` to the given order.
pub fn taylor_expand_objective<'a>(
    model: &'a ModelState,
    ds: &'a Dataset,
    rows: &'a [usize],
    damping: f64,
    order: u8,
) -> Result<QuadraticModel<'a>> {
    if !(damping > 0.0) && order == 1 {
        return Err(Error::InvalidArgument("first-order expansion needs damping > 0".into()));
    }
    let gradient = model.grad(ds, rows, &vec![1.0; rows.len()])?;
    let curvature = match order {
        1 => None,
        2 => Some(CurvatureOp::hessian(model, ds, rows, damping)),
        _ => return Err(Error::InvalidArgument(format!("expansion order {order} not in {{1, 2}}"))),
    };
    Ok(QuadraticModel {
        gradient,
        damping,
        curvature,
    })
}

/// `p x k` matrix of independent standard normals, filled row by row.
pub fn gaussian_projection(p: usize, k: usize, seed: u64) -> Array2<f64> {
    let mut rng = SeededRng::new(seed, Domain::Projection, 0);
    Array2::from_shape_simple_fn((p, k), || rng.standard_normal())
}

/// Precomputed single-checkpoint TRAK quantities: the projection and, per
/// subset entry, `u_i = -r_i (Phi^T Phi)^+ phi_i`.
pub struct TrakFeatures {
    projection: Array2<f64>,
    u: Array2<f64>,
    pub rank: usize,
    pub gram_rows: usize,
}

impl TrakFeatures {
    pub fn build(
        problem: &AttributionProblem<'_>,
        projection: &Array2<f64>,
        gram_set: GramSet,
        pseudo_inverse: bool,
    ) -> Result<Self> {
        let p = problem.model.param_count();
        if projection.nrows() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: projection.nrows(),
            });
        }
        let k = projection.ncols();
        let (g_sub, parts) = problem.model.scalar_output_grads(problem.train, problem.subset)?;
        let phi_sub = g_sub.dot(projection);
        let gram_rows;
        let phi_gram = match gram_set {
            GramSet::Subset => {
                gram_rows = problem.subset.len();
                phi_sub.clone()
            }
            GramSet::Full => {
                gram_rows = problem.train.len();
                let (g_all, _) = problem.model.scalar_output_grads(problem.train, &problem.all_rows())?;
                g_all.dot(projection)
            }
        };
        let gram = phi_gram.t().dot(&phi_gram);
        let f = nalgebra::DMatrix::from_fn(k, k, |a, b| gram[[a, b]]);
        let rhs = nalgebra::DMatrix::from_fn(k, phi_sub.nrows(), |a, i| phi_sub[[i, a]]);
        let (solved, rank) = match f.clone().cholesky() {
            Some(ch) => (ch.solve(&rhs), k),
            None if pseudo_inverse => pinv_solve(f, &rhs),
            None => {
                return Err(Error::RankDeficient(format!(
                    "projected gram matrix ({k} x {k}) is singular; enable pseudo_inverse"
                )))
            }
        };
        let u = Array2::from_shape_fn((phi_sub.nrows(), k), |(i, a)| {
            // -r_i = lbar'(fbar_i)
            parts[i].d_loss * solved[(a, i)]
        });
        Ok(Self {
            projection: projection.clone(),
            u,
            rank,
            gram_rows,
        })
    }

    pub fn scores(&self, test_grad: &[f64]) -> Vec<f64> {
        let pt = self.projection.t().dot(&ArrayView1::from(test_grad));
        self.u.dot(&pt).to_vec()
    }
}

fn pinv_solve(f: nalgebra::DMatrix<f64>, rhs: &nalgebra::DMatrix<f64>) -> (nalgebra::DMatrix<f64>, usize) {
    let k = f.nrows();
    let eig = nalgebra::SymmetricEigen::new(f);
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let cutoff = max * k as f64 * f64::EPSILON;
    let mut rank = 0;
    let inv = nalgebra::DVector::from_iterator(
        k,
        eig.eigenvalues.iter().map(|&e| {
            if e > cutoff {
                rank += 1;
                1.0 / e
            } else {
                0.0
            }
        }),
    );
    let q = &eig.eigenvectors;
    let proj = q.transpose() * rhs;
    let scaled = nalgebra::DMatrix::from_fn(k, rhs.ncols(), |a, b| proj[(a, b)] * inv[a]);
    (q * scaled, rank)
}

struct DataInfLayer {
    range: std::ops::Range<usize>,
    damping: f64,
}

/// Layerwise DataInf over all training gradients.
pub struct DataInfState {
    all_grads: Array2<f64>,
    subset: Vec<usize>,
    layers: Vec<DataInfLayer>,
}

impl DataInfState {
    /// Per-layer damping is the mean over training instances of the mean
    /// squared gradient entry in that layer, divided by `lambda_const`.
    pub fn build(problem: &AttributionProblem<'_>, lambda_const: f64) -> Result<Self> {
        let all_grads = problem.model.per_example_grads(problem.train, &problem.all_rows())?;
        let layers = problem
            .model
            .arch()
            .layer_ranges()
            .into_iter()
            .filter_map(|range| {
                let block = all_grads.slice(s![.., range.clone()]);
                let pl = range.len() as f64;
                let mean_sq = block.outer_iter().map(|g| g.dot(&g) / pl).sum::<f64>() / block.nrows() as f64;
                let damping = mean_sq / lambda_const;
                // A layer whose gradients all vanish contributes nothing.
                (damping > 0.0).then_some(DataInfLayer { range, damping })
            })
            .collect();
        Ok(Self {
            all_grads,
            subset: problem.subset.to_vec(),
            layers,
        })
    }

    /// Builds directly from gradients with explicit per-layer damping.
    pub fn from_parts(
        all_grads: Array2<f64>,
        subset: Vec<usize>,
        layers: Vec<(std::ops::Range<usize>, f64)>,
    ) -> Self {
        Self {
            all_grads,
            subset,
            layers: layers
                .into_iter()
                .map(|(range, damping)| DataInfLayer { range, damping })
                .collect(),
        }
    }

    pub fn layer_damping(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.damping).collect()
    }

    pub fn scores(&self, test_grad: &[f64]) -> Vec<f64> {
        let n = self.all_grads.nrows() as f64;
        let mut out = vec![0.0; self.subset.len()];
        for layer in &self.layers {
            let lam = layer.damping;
            let block = self.all_grads.slice(s![.., layer.range.clone()]);
            let tg = ArrayView1::from(&test_grad[layer.range.clone()]);
            let l_test = block.dot(&tg);
            let coef = Array1::from_shape_fn(block.nrows(), |i| {
                let gi = block.row(i);
                l_test[i] / (lam + gi.dot(&gi))
            });
            let w = block.t().dot(&coef);
            for (o, &k) in out.iter_mut().zip(&self.subset) {
                let gk = block.row(k);
                *o += (l_test[k] - gk.dot(&w) / n) / lam;
            }
        }
        out
    }
}
