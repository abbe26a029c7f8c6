//! Fixed-architecture MLP: forward pass, losses, exact gradients, per-example
//! gradients, Hessian-vector products and the Gauss-Newton scalar output.
//!
//! Parameters live in one flat `f64` vector. Layer `k` (fan-in `a`, fan-out
//! `b`) occupies `(a + 1) * b` consecutive entries: the `b x a` weight matrix
//! in row-major order followed by the `b` biases. Hidden layers apply the
//! configured activation; the output layer is linear. Regression uses one
//! output with loss `0.5 (f - y)^2`; classification uses one logit per class
//! with softmax cross-entropy.
//!
//! # Model file format
//!
//! Plain UTF-8 text, one record per line:
//!
//! ```text
//! fimoda-model v1
//! task <regression | classification K>
//! activation <relu | tanh>
//! widths <d> <h1> ... <out>
//! params <p>
//! <theta_0>
//! ...
//! <theta_{p-1}>
//! ```
//!
//! Each parameter is written in Rust's shortest round-trip decimal form, so
//! write followed by read reproduces every bit.

mod backprop;
mod gauss_newton;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use gauss_newton::GaussNewtonContext;

use crate::data::{Dataset, Task};
use crate::error::{Error, Result};
use crate::rng::{Domain, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub task: Task,
}

impl Architecture {
    /// Two hidden layers of 128 units.
    pub fn default_mlp(input: usize, task: Task) -> Self {
        Self::mlp(input, &[128, 128], task)
    }

    pub fn mlp(input: usize, hidden: &[usize], task: Task) -> Self {
        Self {
            input,
            hidden: hidden.to_vec(),
            activation: Activation::Relu,
            task,
        }
    }

    /// Single affine layer (no hidden units).
    pub fn linear(input: usize, task: Task) -> Self {
        Self::mlp(input, &[], task)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn output(&self) -> usize {
        self.task.output_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output());
        w
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `(fan_in, fan_out)` of layer `k`.
    pub fn layer_shape(&self, k: usize) -> (usize, usize) {
        let w = self.widths();
        (w[k], w[k + 1])
    }

    pub fn layer_offset(&self, k: usize) -> usize {
        (0..k)
            .map(|j| {
                let (a, b) = self.layer_shape(j);
                (a + 1) * b
            })
            .sum()
    }

    /// Parameter range of each layer block (weights and bias together).
    pub fn layer_ranges(&self) -> Vec<std::ops::Range<usize>> {
        (0..self.num_layers())
            .map(|k| {
                let (a, b) = self.layer_shape(k);
                let off = self.layer_offset(k);
                off..off + (a + 1) * b
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_offset(self.num_layers())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if let Task::Classification { num_classes } = self.task {
            if num_classes < 2 {
                return Err(Error::InvalidArgument("classification needs >= 2 outputs".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    arch: Architecture,
    params: Vec<f64>,
}

impl ModelState {
    pub fn new(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: arch.param_count(),
                got: params.len(),
            });
        }
        if params.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        let p = arch.param_count();
        Self::new(arch, vec![0.0; p])
    }

    /// Fan-in scaled uniform initialization: every weight and bias of a layer
    /// with fan-in `a` is drawn from `U(-1/sqrt(a), 1/sqrt(a))`, layer by
    /// layer in storage order, from the `Init` stream of `seed`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = SeededRng::new(seed, Domain::Init, 0);
        let mut params = Vec::with_capacity(arch.param_count());
        for k in 0..arch.num_layers() {
            let (fan_in, fan_out) = arch.layer_shape(k);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..(fan_in + 1) * fan_out {
                params.push(rng.uniform(-bound, bound));
            }
        }
        Self::new(arch, params)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn task(&self) -> Task {
        self.arch.task
    }

    /// Same architecture, new parameters.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::new(self.arch.clone(), params)
    }

    /// `theta + step * direction`.
    pub fn shifted(&self, direction: &[f64], step: f64) -> Result<Self> {
        let params = self
            .params
            .iter()
            .zip(direction)
            .map(|(a, b)| a + step * b)
            .collect();
        self.with_params(params)
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.dim() != self.arch.input {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input,
                got: ds.dim(),
            });
        }
        if ds.task() != self.arch.task {
            return Err(Error::UnsupportedTask(format!(
                "model task {:?} does not match dataset task {:?}",
                self.arch.task,
                ds.task()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.arch.input {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input,
                got: x.len(),
            });
        }
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row shape");
        let fwd = backprop::forward(&self.arch, &self.params, xv);
        Ok(fwd.output().row(0).to_vec())
    }

    /// Outputs for a block of rows (one output row per input row).
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.arch.input {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input,
                got: x.ncols(),
            });
        }
        Ok(backprop::forward(&self.arch, &self.params, x).pres.pop().expect("output layer"))
    }

    pub fn loss(&self, x: &[f64], y: f64) -> Result<f64> {
        let out = self.forward(x)?;
        Ok(backprop::head_loss(self.arch.task, Array1::from(out).view(), y))
    }

    /// Per-row losses for the given dataset rows.
    pub fn losses(&self, ds: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
        self.check_dataset(ds)?;
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let x = ds.features().select(Axis(0), rows);
        let fwd = backprop::forward(&self.arch, &self.params, x.view());
        let out = fwd.output();
        Ok(rows
            .iter()
            .enumerate()
            .map(|(k, &i)| backprop::head_loss(self.arch.task, out.row(k), ds.target(i)))
            .collect())
    }

    /// Gradient of `sum_k weights[k] * L(z_{rows[k]}; theta)`.
    pub fn grad(&self, ds: &Dataset, rows: &[usize], weights: &[f64]) -> Result<Vec<f64>> {
        self.check_dataset(ds)?;
        if rows.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                got: weights.len(),
            });
        }
        if rows.is_empty() {
            return Ok(vec![0.0; self.param_count()]);
        }
        let x = ds.features().select(Axis(0), rows);
        let fwd = backprop::forward(&self.arch, &self.params, x.view());
        let d_out = self.output_cotangents(&fwd, ds, rows, Some(weights));
        Ok(backprop::backward(&self.arch, &self.params, &fwd, d_out))
    }

    /// Loss gradient of a single instance given directly.
    pub fn instance_grad(&self, x: &[f64], y: f64) -> Result<Vec<f64>> {
        let ds = Dataset::from_parts(
            Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row"),
            vec![y],
            self.arch.task,
        )?;
        self.grad(&ds, &[0], &[1.0])
    }

    /// One loss-gradient row per requested dataset row.
    pub fn per_example_grads(&self, ds: &Dataset, rows: &[usize]) -> Result<Array2<f64>> {
        self.check_dataset(ds)?;
        if rows.is_empty() {
            return Ok(Array2::zeros((0, self.param_count())));
        }
        let x = ds.features().select(Axis(0), rows);
        let fwd = backprop::forward(&self.arch, &self.params, x.view());
        let d_out = self.output_cotangents(&fwd, ds, rows, None);
        Ok(backprop::backward_per_example(&self.arch, &self.params, &fwd, d_out))
    }

    /// `sum_k weights[k] * Hess_theta L(z_{rows[k]}) v`, exact up to rounding,
    /// by forward-over-reverse differentiation.
    pub fn hvp(&self, ds: &Dataset, rows: &[usize], weights: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check_dataset(ds)?;
        if v.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: v.len(),
            });
        }
        if rows.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: rows.len(),
                got: weights.len(),
            });
        }
        if rows.is_empty() {
            return Ok(vec![0.0; self.param_count()]);
        }
        let x = ds.features().select(Axis(0), rows);
        let targets: Vec<f64> = rows.iter().map(|&i| ds.target(i)).collect();
        Ok(backprop::hessian_vector(
            &self.arch,
            &self.params,
            x.view(),
            &targets,
            weights,
            v,
        ))
    }

    /// `(fbar, lbar', lbar'')` for one instance. Regression: `fbar = f - y`,
    /// `lbar = fbar^2 / 2`. Classification: `fbar` is the target-class
    /// log-odds and `lbar(u) = ln(1 + e^-u)`.
    pub fn scalar_output(&self, x: &[f64], y: f64) -> Result<ScalarOutput> {
        let out = Array1::from(self.forward(x)?);
        Ok(ScalarOutput::from_output(self.arch.task, out.view(), y))
    }

    /// Gradients of `fbar` (one row per requested row) plus the composition
    /// derivatives at each row.
    pub fn scalar_output_grads(
        &self,
        ds: &Dataset,
        rows: &[usize],
    ) -> Result<(Array2<f64>, Vec<ScalarOutput>)> {
        self.check_dataset(ds)?;
        if rows.is_empty() {
            return Ok((Array2::zeros((0, self.param_count())), Vec::new()));
        }
        let x = ds.features().select(Axis(0), rows);
        let fwd = backprop::forward(&self.arch, &self.params, x.view());
        let out = fwd.output();
        let mut d_out = Array2::zeros(out.raw_dim());
        let mut parts = Vec::with_capacity(rows.len());
        for (k, &i) in rows.iter().enumerate() {
            let (_, d) = backprop::scalar_output(self.arch.task, out.row(k), ds.target(i));
            d_out.row_mut(k).assign(&d);
            parts.push(ScalarOutput::from_output(self.arch.task, out.row(k), ds.target(i)));
        }
        let g = backprop::backward_per_example(&self.arch, &self.params, &fwd, d_out);
        Ok((g, parts))
    }

    fn output_cotangents(
        &self,
        fwd: &backprop::Forward,
        ds: &Dataset,
        rows: &[usize],
        weights: Option<&[f64]>,
    ) -> Array2<f64> {
        let out = fwd.output();
        let mut d_out = Array2::zeros(out.raw_dim());
        for (k, &i) in rows.iter().enumerate() {
            backprop::head_grad(self.arch.task, out.row(k), ds.target(i), d_out.row_mut(k));
            if let Some(w) = weights {
                d_out.row_mut(k).mapv_inplace(|d| d * w[k]);
            }
        }
        d_out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::from("fimoda-model v1\n");
        match self.arch.task {
            Task::Regression => s.push_str("task regression\n"),
            Task::Classification { num_classes } => {
                writeln!(s, "task classification {num_classes}").unwrap()
            }
        }
        let act = match self.arch.activation {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        };
        writeln!(s, "activation {act}").unwrap();
        let widths: Vec<String> = self.arch.widths().iter().map(|w| w.to_string()).collect();
        writeln!(s, "widths {}", widths.join(" ")).unwrap();
        writeln!(s, "params {}", self.params.len()).unwrap();
        for p in &self.params {
            writeln!(s, "{p}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::ModelFormat(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("fimoda-model v1") {
            return Err(bad("missing `fimoda-model v1` header"));
        }
        let mut field = |name: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing `{name}` line")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name) {
                return Err(bad(&format!("expected `{name}` line, found `{line}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let task = match field("task")?.as_slice() {
            [t] if t == "regression" => Task::Regression,
            [t, k] if t == "classification" => Task::Classification {
                num_classes: k.parse().map_err(|_| bad("class count"))?,
            },
            _ => return Err(bad("task")),
        };
        let activation = match field("activation")?.as_slice() {
            [a] if a == "relu" => Activation::Relu,
            [a] if a == "tanh" => Activation::Tanh,
            _ => return Err(bad("activation")),
        };
        let widths: Vec<usize> = field("widths")?
            .iter()
            .map(|w| w.parse().map_err(|_| bad("width")))
            .collect::<Result<_>>()?;
        if widths.len() < 2 || *widths.last().unwrap() != task.output_dim() {
            return Err(bad("widths inconsistent with task"));
        }
        let count: usize = match field("params")?.as_slice() {
            [c] => c.parse().map_err(|_| bad("param count"))?,
            _ => return Err(bad("param count")),
        };
        let params: Vec<f64> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse().map_err(|_| bad(&format!("parameter `{l}`"))))
            .collect::<Result<_>>()?;
        if params.len() != count {
            return Err(bad("parameter count does not match header"));
        }
        let arch = Architecture {
            input: widths[0],
            hidden: widths[1..widths.len() - 1].to_vec(),
            activation,
            task,
        };
        Self::new(arch, params)
    }
}

/// Value and derivatives of the convex univariate loss composed with the
/// scalar model output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarOutput {
    pub value: f64,
    pub d_loss: f64,
    pub d2_loss: f64,
}

impl ScalarOutput {
    fn from_output(task: Task, out: ndarray::ArrayView1<'_, f64>, y: f64) -> Self {
        let (value, _) = backprop::scalar_output(task, out, y);
        match task {
            Task::Regression => Self {
                value,
                d_loss: value,
                d2_loss: 1.0,
            },
            Task::Classification { .. } => {
                // lbar(u) = ln(1 + e^-u): lbar' = -sigmoid(-u), lbar'' = sigmoid(u) sigmoid(-u)
                let s_neg = sigmoid(-value);
                Self {
                    value,
                    d_loss: -s_neg,
                    d2_loss: s_neg * (1.0 - s_neg),
                }
            }
        }
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests;
