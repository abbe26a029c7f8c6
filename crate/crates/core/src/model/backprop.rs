//! Batched forward, reverse-mode and forward-over-reverse (R-operator)
//! passes for the dense MLP. Rows of every matrix are instances.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};

use super::{Activation, Architecture};
use crate::data::Task;

pub(crate) struct Forward {
    /// `acts[0]` is the input batch, `acts[k]` the activations feeding layer `k`.
    pub acts: Vec<Array2<f64>>,
    /// Pre-activations of every layer; the last one is the network output.
    pub pres: Vec<Array2<f64>>,
}

impl Forward {
    pub fn output(&self) -> &Array2<f64> {
        self.pres.last().expect("at least one layer")
    }
}

pub(crate) fn layer_views<'a>(
    arch: &Architecture,
    params: &'a [f64],
    k: usize,
) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
    let (fan_in, fan_out) = arch.layer_shape(k);
    let off = arch.layer_offset(k);
    let w = ArrayView2::from_shape((fan_out, fan_in), &params[off..off + fan_in * fan_out])
        .expect("layer slice has layer shape");
    let b = ArrayView1::from(&params[off + fan_in * fan_out..off + (fan_in + 1) * fan_out]);
    (w, b)
}

fn activate(act: Activation, z: &Array2<f64>) -> Array2<f64> {
    match act {
        Activation::Relu => z.mapv(|v| v.max(0.0)),
        Activation::Tanh => z.mapv(f64::tanh),
    }
}

fn d_activate(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => {
            let t = z.tanh();
            1.0 - t * t
        }
    }
}

fn d2_activate(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Relu => 0.0,
        Activation::Tanh => {
            let t = z.tanh();
            -2.0 * t * (1.0 - t * t)
        }
    }
}

/// Copies a logically row-major iterator into a flat slice.
fn fill<'a>(dst: &mut [f64], src: impl Iterator<Item = &'a f64>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *s;
    }
}

pub(crate) fn forward(arch: &Architecture, params: &[f64], x: ArrayView2<'_, f64>) -> Forward {
    let layers = arch.num_layers();
    let mut acts = Vec::with_capacity(layers);
    let mut pres = Vec::with_capacity(layers);
    acts.push(x.to_owned());
    for k in 0..layers {
        let (w, b) = layer_views(arch, params, k);
        let z = acts[k].dot(&w.t()) + b;
        if k + 1 < layers {
            acts.push(activate(arch.activation, &z));
        }
        pres.push(z);
    }
    Forward { acts, pres }
}

/// Backpropagates output cotangents (one row per instance, already weighted)
/// and returns the summed parameter gradient.
pub(crate) fn backward(arch: &Architecture, params: &[f64], fwd: &Forward, d_out: Array2<f64>) -> Vec<f64> {
    let mut grad = vec![0.0; arch.param_count()];
    let mut delta = d_out;
    for k in (0..arch.num_layers()).rev() {
        let (fan_in, fan_out) = arch.layer_shape(k);
        let off = arch.layer_offset(k);
        let gw = delta.t().dot(&fwd.acts[k]);
        fill(&mut grad[off..off + fan_in * fan_out], gw.iter());
        let gb = delta.sum_axis(Axis(0));
        fill(&mut grad[off + fan_in * fan_out..off + (fan_in + 1) * fan_out], gb.iter());
        if k > 0 {
            let (w, _) = layer_views(arch, params, k);
            let mut d_act = delta.dot(&w);
            let pre = &fwd.pres[k - 1];
            d_act.zip_mut_with(pre, |d, &z| *d *= d_activate(arch.activation, z));
            delta = d_act;
        }
    }
    grad
}

/// Like [`backward`] but keeps one gradient row per instance.
pub(crate) fn backward_per_example(
    arch: &Architecture,
    params: &[f64],
    fwd: &Forward,
    d_out: Array2<f64>,
) -> Array2<f64> {
    let batch = d_out.nrows();
    let mut out = Array2::<f64>::zeros((batch, arch.param_count()));
    let mut delta = d_out;
    for k in (0..arch.num_layers()).rev() {
        let (fan_in, fan_out) = arch.layer_shape(k);
        let off = arch.layer_offset(k);
        let a = &fwd.acts[k];
        for i in 0..batch {
            let mut row = out.row_mut(i);
            let d = delta.row(i);
            let a_i = a.row(i);
            for o in 0..fan_out {
                let dv = d[o];
                let base = off + o * fan_in;
                for j in 0..fan_in {
                    row[base + j] = dv * a_i[j];
                }
                row[off + fan_in * fan_out + o] = dv;
            }
        }
        if k > 0 {
            let (w, _) = layer_views(arch, params, k);
            let mut d_act = delta.dot(&w);
            d_act.zip_mut_with(&fwd.pres[k - 1], |d, &z| *d *= d_activate(arch.activation, z));
            delta = d_act;
        }
    }
    out
}

/// Pearlmutter's R-operator: returns `sum_i w_i * Hess(L_i) v` for the batch,
/// via one forward pass of directional derivatives followed by one
/// backward pass that carries both the adjoint and its directional derivative.
pub(crate) fn hessian_vector(
    arch: &Architecture,
    params: &[f64],
    x: ArrayView2<'_, f64>,
    targets: &[f64],
    weights: &[f64],
    v: &[f64],
) -> Vec<f64> {
    let layers = arch.num_layers();
    let fwd = forward(arch, params, x);

    // R-forward: directional derivatives of pre-activations and activations.
    let batch = x.nrows();
    let mut r_acts: Vec<Array2<f64>> = Vec::with_capacity(layers);
    let mut r_pres: Vec<Array2<f64>> = Vec::with_capacity(layers);
    r_acts.push(Array2::zeros((batch, arch.input)));
    for k in 0..layers {
        let (w, _) = layer_views(arch, params, k);
        let (vw, vb) = layer_views(arch, v, k);
        let rz = fwd.acts[k].dot(&vw.t()) + r_acts[k].dot(&w.t()) + vb;
        if k + 1 < layers {
            let mut ra = rz.clone();
            ra.zip_mut_with(&fwd.pres[k], |r, &z| *r *= d_activate(arch.activation, z));
            r_acts.push(ra);
        }
        r_pres.push(rz);
    }

    // Output adjoint and its directional derivative.
    let out = fwd.output();
    let odim = out.ncols();
    let mut delta = Array2::<f64>::zeros((batch, odim));
    let mut r_delta = Array2::<f64>::zeros((batch, odim));
    for i in 0..batch {
        head_grad(arch.task, out.row(i), targets[i], delta.row_mut(i));
        head_hess_vec(arch.task, out.row(i), targets[i], r_pres[layers - 1].row(i), r_delta.row_mut(i));
        delta.row_mut(i).mapv_inplace(|d| d * weights[i]);
        r_delta.row_mut(i).mapv_inplace(|d| d * weights[i]);
    }

    let mut hv = vec![0.0; arch.param_count()];
    for k in (0..layers).rev() {
        let (fan_in, fan_out) = arch.layer_shape(k);
        let off = arch.layer_offset(k);
        let rgw = r_delta.t().dot(&fwd.acts[k]) + delta.t().dot(&r_acts[k]);
        fill(&mut hv[off..off + fan_in * fan_out], rgw.iter());
        let rgb = r_delta.sum_axis(Axis(0));
        fill(&mut hv[off + fan_in * fan_out..off + (fan_in + 1) * fan_out], rgb.iter());
        if k > 0 {
            let (w, _) = layer_views(arch, params, k);
            let (vw, _) = layer_views(arch, v, k);
            let d_act = delta.dot(&w);
            let r_d_act = r_delta.dot(&w) + delta.dot(&vw);
            let pre = &fwd.pres[k - 1];
            let r_pre = &r_pres[k - 1];
            let mut next = Array2::<f64>::zeros(d_act.raw_dim());
            let mut r_next = Array2::<f64>::zeros(d_act.raw_dim());
            for ((((n, rn), &da), &rda), (&z, &rz)) in next
                .iter_mut()
                .zip(r_next.iter_mut())
                .zip(d_act.iter())
                .zip(r_d_act.iter())
                .zip(pre.iter().zip(r_pre.iter()))
            {
                let s1 = d_activate(arch.activation, z);
                *n = da * s1;
                *rn = rda * s1 + da * d2_activate(arch.activation, z) * rz;
            }
            delta = next;
            r_delta = r_next;
        }
    }
    hv
}

pub(crate) fn head_loss(task: Task, out: ArrayView1<'_, f64>, y: f64) -> f64 {
    match task {
        Task::Regression => {
            let e = out[0] - y;
            0.5 * e * e
        }
        Task::Classification { .. } => log_sum_exp(out) - out[y as usize],
    }
}

/// dL/d(output).
pub(crate) fn head_grad(task: Task, out: ArrayView1<'_, f64>, y: f64, mut dst: ArrayViewMut1<'_, f64>) {
    match task {
        Task::Regression => dst[0] = out[0] - y,
        Task::Classification { .. } => {
            let p = softmax(out);
            dst.assign(&p);
            dst[y as usize] -= 1.0;
        }
    }
}

/// d2L/d(output)2 times `dir`.
pub(crate) fn head_hess_vec(
    task: Task,
    out: ArrayView1<'_, f64>,
    _y: f64,
    dir: ArrayView1<'_, f64>,
    mut dst: ArrayViewMut1<'_, f64>,
) {
    match task {
        Task::Regression => dst[0] = dir[0],
        Task::Classification { .. } => {
            let p = softmax(out);
            let pd = p.dot(&dir);
            for k in 0..p.len() {
                dst[k] = p[k] * (dir[k] - pd);
            }
        }
    }
}

pub(crate) fn log_sum_exp(v: ArrayView1<'_, f64>) -> f64 {
    let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(v: ArrayView1<'_, f64>) -> Array1<f64> {
    let lse = log_sum_exp(v);
    v.mapv(|x| (x - lse).exp())
}

/// Scalar output for the Gauss-Newton composition, with its derivative
/// with respect to the network output.
///
/// Regression: `fbar = f - y`. Classification: `fbar = log(p_y / (1 - p_y))`
/// (target-class log-odds), so that the cross-entropy equals
/// `softplus(-fbar)` for any number of classes.
pub(crate) fn scalar_output(task: Task, out: ArrayView1<'_, f64>, y: f64) -> (f64, Array1<f64>) {
    match task {
        Task::Regression => (out[0] - y, Array1::from_elem(1, 1.0)),
        Task::Classification { .. } => {
            let t = y as usize;
            let others: Array1<f64> = out
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != t)
                .map(|(_, &o)| o)
                .collect();
            let lse_others = log_sum_exp(others.view());
            let fbar = out[t] - lse_others;
            let mut d = Array1::zeros(out.len());
            for k in 0..out.len() {
                d[k] = if k == t {
                    1.0
                } else {
                    -(out[k] - lse_others).exp()
                };
            }
            (fbar, d)
        }
    }
}

