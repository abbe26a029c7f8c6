//! Damped inverse-curvature-vector products: conjugate gradient and LiSSA
//! over any symmetric curvature operator.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{GaussNewtonContext, ModelState};

/// Default damping added to the curvature before inversion.
pub const DEFAULT_DAMPING: f64 = 0.01;
/// Scales tried in order by [`lissa_auto`].
pub const LISSA_SCALES: [f64; 6] = [10.0, 20.0, 50.0, 100.0, 200.0, 500.0];
pub const LISSA_DEPTH: usize = 5000;

type ApplyFn<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a>;

/// A symmetric linear operator `v -> H v` on R^p plus a damping `lambda`;
/// solvers work with `H + lambda I`. Positive definiteness of the damped
/// operator is not checked spectrally; solver divergence detection stands in.
pub struct CurvatureOp<'a> {
    apply: ApplyFn<'a>,
    dim: usize,
    damping: f64,
}

impl<'a> CurvatureOp<'a> {
    pub fn new(dim: usize, damping: f64, apply: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a) -> Self {
        Self {
            apply: Box::new(apply),
            dim,
            damping,
        }
    }

    /// True Hessian of `sum_{i in rows} L(z_i; theta)`.
    pub fn hessian(model: &'a ModelState, ds: &'a Dataset, rows: &'a [usize], damping: f64) -> Self {
        let weights = vec![1.0; rows.len()];
        Self::new(model.param_count(), damping, move |v| {
            model
                .hvp(ds, rows, &weights, v)
                .expect("hessian operator built from a consistent model and dataset")
        })
    }

    /// Gauss-Newton curvature `G^T V G`.
    pub fn gauss_newton(ctx: &'a GaussNewtonContext, damping: f64) -> Self {
        Self::new(ctx.dim(), damping, move |v| ctx.gnvp(v))
    }

    pub fn dense(matrix: &'a Array2<f64>, damping: f64) -> Self {
        assert_eq!(matrix.nrows(), matrix.ncols(), "dense curvature must be square");
        Self::new(matrix.nrows(), damping, move |v| matrix.dot(&ArrayView1::from(v)).to_vec())
    }

    /// `H = 0`, so the damped operator is `lambda I`.
    pub fn zero(dim: usize, damping: f64) -> Self {
        Self::new(dim, damping, move |_| vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (self.apply)(v)
    }

    /// `(H + lambda I) v`.
    pub fn apply_damped(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.apply(v);
        for (o, x) in out.iter_mut().zip(v) {
            *o += self.damping * x;
        }
        out
    }

    pub fn residual_norm(&self, x: &[f64], b: &[f64]) -> f64 {
        let ax = self.apply_damped(x);
        norm(&ax.iter().zip(b).map(|(a, c)| a - c).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// `||(H + lambda I) x - b||`, recomputed from the returned solution.
    pub residual_norm: f64,
    pub converged: bool,
    pub diverged: bool,
    /// LiSSA scale used, if applicable.
    pub scale: Option<f64>,
}

impl SolverReport {
    pub fn into_result(self) -> Result<Self> {
        if self.diverged {
            Err(Error::SolverDiverged(Box::new(self)))
        } else {
            Ok(self)
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Conjugate gradient on `(H + lambda I) x = b`, stopping once the recursive
/// residual drops below `tol * ||b||`.
pub fn cg_solve(op: &CurvatureOp<'_>, b: &[f64], tol: f64, max_iter: usize) -> Result<SolverReport> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("cg tolerance {tol} must be positive")));
    }
    if b.len() != op.dim() {
        return Err(Error::DimensionMismatch {
            expected: op.dim(),
            got: b.len(),
        });
    }
    let p_dim = op.dim();
    let b_norm = norm(b);
    let mut x = vec![0.0; p_dim];
    if b_norm == 0.0 {
        return Ok(SolverReport {
            solution: x,
            iterations: 0,
            residual_norm: 0.0,
            converged: true,
            diverged: false,
            scale: None,
        });
    }
    let target = tol * b_norm;
    let mut r = b.to_vec();
    let mut dir = r.clone();
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    let mut diverged = false;
    while iterations < max_iter && rr.sqrt() > target {
        let ad = op.apply_damped(&dir);
        let curvature = dot(&dir, &ad);
        if !(curvature > 0.0) || !curvature.is_finite() {
            // Indefinite or broken operator.
            diverged = true;
            break;
        }
        let alpha = rr / curvature;
        for k in 0..p_dim {
            x[k] += alpha * dir[k];
            r[k] -= alpha * ad[k];
        }
        let rr_next = dot(&r, &r);
        iterations += 1;
        if !rr_next.is_finite() {
            diverged = true;
            break;
        }
        let beta = rr_next / rr;
        for k in 0..p_dim {
            dir[k] = r[k] + beta * dir[k];
        }
        rr = rr_next;
    }
    let residual_norm = op.residual_norm(&x, b);
    let diverged = diverged || !residual_norm.is_finite();
    Ok(SolverReport {
        converged: !diverged && residual_norm <= target * (1.0 + 1e-6) + 1e-300,
        solution: x,
        iterations,
        residual_norm,
        diverged,
        scale: None,
    })
}

/// Truncated Neumann series: `x_0 = b`, `x_{k+1} = b + (I - (H + lambda I)/scale) x_k`,
/// returning `x_depth / scale`. Iterates whose norm exceeds `1e6 ||b||` (or
/// turn non-finite) flag divergence.
///
/// The operator here is deterministic, so `repeat` independent runs are
/// identical and their average is the single run; `repeat` is validated and
/// recorded only.
pub fn lissa_solve(
    op: &CurvatureOp<'_>,
    b: &[f64],
    depth: usize,
    scale: f64,
    repeat: usize,
) -> Result<SolverReport> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("lissa scale {scale} must be positive")));
    }
    if repeat == 0 {
        return Err(Error::InvalidArgument("lissa repeat must be >= 1".into()));
    }
    if b.len() != op.dim() {
        return Err(Error::DimensionMismatch {
            expected: op.dim(),
            got: b.len(),
        });
    }
    let limit = 1e6 * norm(b);
    let mut x = b.to_vec();
    let mut iterations = 0;
    let mut diverged = false;
    for _ in 0..depth {
        let ax = op.apply_damped(&x);
        for k in 0..x.len() {
            x[k] = b[k] + x[k] - ax[k] / scale;
        }
        iterations += 1;
        let xn = norm(&x);
        if !xn.is_finite() || xn > limit {
            diverged = true;
            break;
        }
    }
    x.iter_mut().for_each(|v| *v /= scale);
    let residual_norm = if diverged {
        f64::INFINITY
    } else {
        op.residual_norm(&x, b)
    };
    Ok(SolverReport {
        solution: x,
        iterations,
        residual_norm,
        converged: !diverged,
        diverged,
        scale: Some(scale),
    })
}

/// Runs LiSSA with each scale in `scales` until one does not diverge. When
/// all diverge the last report (largest scale) is returned, flagged.
pub fn lissa_auto(op: &CurvatureOp<'_>, b: &[f64], depth: usize, scales: &[f64]) -> Result<SolverReport> {
    let mut last = None;
    for &scale in scales {
        let report = lissa_solve(op, b, depth, scale, 1)?;
        if !report.diverged {
            return Ok(report);
        }
        tracing::debug!(scale, "lissa diverged, trying next scale");
        last = Some(report);
    }
    last.ok_or_else(|| Error::InvalidArgument("empty lissa scale ladder".into()))
}

/// Dense damped solve via Cholesky; used where `p` is small enough to
/// factorize (and as a reference in tests).
pub fn dense_solve(matrix: &Array2<f64>, damping: f64, b: &[f64]) -> Result<Vec<f64>> {
    let p = matrix.nrows();
    let m = nalgebra::DMatrix::from_fn(p, p, |i, j| {
        matrix[[i, j]] + if i == j { damping } else { 0.0 }
    });
    let rhs = nalgebra::DVector::from_column_slice(b);
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("damped matrix not positive definite".into()))?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, SeededRng};
    use proptest::prelude::*;

    fn random_spd(p: usize, seed: u64) -> Array2<f64> {
        let mut r = SeededRng::new(seed, Domain::Projection, 1);
        let a = Array2::from_shape_fn((p, p), |_| r.standard_normal());
        a.t().dot(&a) / p as f64 + Array2::<f64>::eye(p) * 0.5
    }

    fn random_vec(p: usize, seed: u64) -> Vec<f64> {
        let mut r = SeededRng::new(seed, Domain::Projection, 2);
        (0..p).map(|_| r.standard_normal()).collect()
    }

    /// LU-based reference, independent of the Cholesky path used in `dense_solve`.
    fn lu_solve(a: &Array2<f64>, damping: f64, b: &[f64]) -> Vec<f64> {
        let p = a.nrows();
        let m = nalgebra::DMatrix::from_fn(p, p, |i, j| a[[i, j]] + if i == j { damping } else { 0.0 });
        m.lu()
            .solve(&nalgebra::DVector::from_column_slice(b))
            .unwrap()
            .iter()
            .copied()
            .collect()
    }

    #[test]
    fn cg_with_zero_curvature_divides_by_damping() {
        let op = CurvatureOp::zero(4, 2.0);
        let b = [1.0, -2.0, 3.0, 0.5];
        let rep = cg_solve(&op, &b, 1e-12, 10).unwrap();
        for (x, bb) in rep.solution.iter().zip(&b) {
            assert!((x - bb / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cg_zero_rhs_takes_no_iterations() {
        let h = random_spd(5, 1);
        let op = CurvatureOp::dense(&h, 0.0);
        let rep = cg_solve(&op, &[0.0; 5], 1e-10, 50).unwrap();
        assert_eq!(rep.iterations, 0);
        assert!(rep.solution.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cg_matches_direct_solve_on_spd_system() {
        let h = random_spd(20, 3);
        let b = random_vec(20, 4);
        let op = CurvatureOp::dense(&h, 0.01);
        let rep = cg_solve(&op, &b, 1e-13, 200).unwrap();
        let direct = lu_solve(&h, 0.01, &b);
        for (a, c) in rep.solution.iter().zip(&direct) {
            assert!((a - c).abs() < 1e-8);
        }
        assert!(rep.iterations <= 40);
        assert!((rep.residual_norm - op.residual_norm(&rep.solution, &b)).abs() < 1e-10);
    }

    #[test]
    fn cg_flags_indefinite_operator() {
        let h = -Array2::<f64>::eye(3);
        let op = CurvatureOp::dense(&h, 0.5);
        let rep = cg_solve(&op, &[1.0, 2.0, 3.0], 1e-10, 10).unwrap();
        assert!(rep.diverged);
        assert!(rep.into_result().is_err());
    }

    #[test]
    fn cg_rejects_bad_tolerance() {
        let op = CurvatureOp::zero(2, 1.0);
        assert!(cg_solve(&op, &[1.0, 1.0], 0.0, 10).is_err());
    }

    #[test]
    fn lissa_degenerate_cases() {
        let b = [1.0, -2.0, 4.0];
        let op = CurvatureOp::zero(3, 1.0);
        let rep = lissa_solve(&op, &b, 1, 1.0, 1).unwrap();
        assert_eq!(rep.solution, b.to_vec());

        let h = random_spd(3, 8);
        let op = CurvatureOp::dense(&h, 0.1);
        let rep = lissa_solve(&op, &b, 0, 4.0, 1).unwrap();
        assert_eq!(rep.solution, vec![0.25, -0.5, 1.0]);
    }

    #[test]
    fn lissa_detects_divergence_and_ladder_recovers() {
        let h = Array2::<f64>::eye(4) * 30.0;
        let op = CurvatureOp::dense(&h, 0.0);
        let b = random_vec(4, 2);
        let rep = lissa_solve(&op, &b, 500, 10.0, 1).unwrap();
        assert!(rep.diverged);
        assert_eq!(rep.scale, Some(10.0));
        let rep = lissa_auto(&op, &b, 500, &LISSA_SCALES).unwrap();
        assert!(!rep.diverged);
        assert_eq!(rep.scale, Some(20.0));
        for (x, bb) in rep.solution.iter().zip(&b) {
            assert!((x - bb / 30.0).abs() < 1e-10);
        }
    }

    #[test]
    fn lissa_agrees_with_cg_on_damped_system() {
        let h = random_spd(10, 5);
        let b = random_vec(10, 6);
        let op = CurvatureOp::dense(&h, 0.01);
        let cg = cg_solve(&op, &b, 1e-12, 100).unwrap();
        let li = lissa_auto(&op, &b, LISSA_DEPTH, &LISSA_SCALES).unwrap();
        let err = norm(&cg.solution.iter().zip(&li.solution).map(|(a, c)| a - c).collect::<Vec<_>>())
            / norm(&cg.solution);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn dense_solve_agrees_with_lu() {
        let h = random_spd(6, 9);
        let b = random_vec(6, 10);
        let a = dense_solve(&h, 0.3, &b).unwrap();
        let c = lu_solve(&h, 0.3, &b);
        for (x, y) in a.iter().zip(&c) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cg_is_linear_in_rhs(seed in 0u64..500, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let h = random_spd(8, seed);
            let op = CurvatureOp::dense(&h, 0.01);
            let b1 = random_vec(8, seed + 1);
            let b2 = random_vec(8, seed + 2);
            let combo: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| alpha * a + beta * b).collect();
            let tol = 1e-12;
            let x = cg_solve(&op, &combo, tol, 100).unwrap().solution;
            let x1 = cg_solve(&op, &b1, tol, 100).unwrap().solution;
            let x2 = cg_solve(&op, &b2, tol, 100).unwrap().solution;
            for k in 0..8 {
                prop_assert!((x[k] - (alpha * x1[k] + beta * x2[k])).abs() < 1e-7);
            }
        }

        #[test]
        fn more_damping_shrinks_solution(seed in 0u64..500, l1 in 0.001f64..1.0, extra in 0.001f64..5.0) {
            let h = random_spd(6, seed);
            let b = random_vec(6, seed + 7);
            let tol = 1e-12;
            let x1 = cg_solve(&CurvatureOp::dense(&h, l1), &b, tol, 100).unwrap().solution;
            let x2 = cg_solve(&CurvatureOp::dense(&h, l1 + extra), &b, tol, 100).unwrap().solution;
            prop_assert!(norm(&x2) <= norm(&x1) + 1e-9);
        }

        #[test]
        fn reported_residual_is_recomputable(seed in 0u64..500) {
            let h = random_spd(7, seed);
            let b = random_vec(7, seed + 3);
            let op = CurvatureOp::dense(&h, 0.05);
            let rep = cg_solve(&op, &b, 1e-6, 3).unwrap();
            prop_assert!((rep.residual_norm - op.residual_norm(&rep.solution, &b)).abs() < 1e-10);
        }
    }
}
