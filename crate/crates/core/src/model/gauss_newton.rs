use ndarray::{Array1, Array2, ArrayView1};

use super::ModelState;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Materialized Gauss-Newton ingredients over an instance set: rows of `g`
/// are scalar-output gradients, `r_i = -lbar'(fbar_i)` and `v_i = lbar''(fbar_i)`.
#[derive(Debug, Clone)]
pub struct GaussNewtonContext {
    g: Array2<f64>,
    r: Vec<f64>,
    v: Vec<f64>,
    instance_ids: Vec<u64>,
}

impl GaussNewtonContext {
    pub fn build(model: &ModelState, ds: &Dataset, rows: &[usize]) -> Result<Self> {
        let (g, parts) = model.scalar_output_grads(ds, rows)?;
        Ok(Self {
            g,
            r: parts.iter().map(|p| -p.d_loss).collect(),
            v: parts.iter().map(|p| p.d2_loss).collect(),
            instance_ids: rows.iter().map(|&i| ds.ids()[i]).collect(),
        })
    }

    pub fn from_parts(g: Array2<f64>, r: Vec<f64>, v: Vec<f64>, instance_ids: Vec<u64>) -> Result<Self> {
        let n = g.nrows();
        for len in [r.len(), v.len(), instance_ids.len()] {
            if len != n {
                return Err(Error::DimensionMismatch { expected: n, got: len });
            }
        }
        if v.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::InvalidArgument("curvature weights must be finite and >= 0".into()));
        }
        Ok(Self {
            g,
            r,
            v,
            instance_ids,
        })
    }

    /// Replaces the diagonal curvature weights with ones.
    pub fn with_identity_weights(mut self) -> Self {
        self.v.iter_mut().for_each(|x| *x = 1.0);
        self
    }

    pub fn dim(&self) -> usize {
        self.g.ncols()
    }

    pub fn len(&self) -> usize {
        self.g.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.g.nrows() == 0
    }

    pub fn g(&self) -> &Array2<f64> {
        &self.g
    }

    pub fn g_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.g.row(i)
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn instance_ids(&self) -> &[u64] {
        &self.instance_ids
    }

    /// `G^T V G v` without forming the `p x p` product.
    pub fn gnvp(&self, v: &[f64]) -> Vec<f64> {
        let v = ArrayView1::from(v);
        let mut gv: Array1<f64> = self.g.dot(&v);
        gv.iter_mut().zip(&self.v).for_each(|(a, w)| *a *= w);
        self.g.t().dot(&gv).to_vec()
    }
}
