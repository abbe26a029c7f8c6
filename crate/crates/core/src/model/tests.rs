use approx_eq::*;
use ndarray::Array2;
use proptest::prelude::*;

use super::*;
use crate::data::{make_synthetic, SyntheticKind};
use crate::rng::{Domain, SeededRng};

mod approx_eq {
    pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        diff / scale.max(1e-300)
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut r = SeededRng::new(seed, Domain::Projection, 99);
    (0..n).map(|_| r.standard_normal()).collect()
}

fn regression_data(n: usize, d: usize, seed: u64) -> Dataset {
    make_synthetic(&SyntheticKind::LinearRegression { weights: None }, n, d, 0.3, seed)
        .unwrap()
        .0
}

fn classification_data(n: usize, d: usize, classes: usize, seed: u64) -> Dataset {
    let mut r = SeededRng::new(seed, Domain::Synthetic, 7);
    let x = Array2::from_shape_fn((n, d), |_| r.standard_normal());
    let y = (0..n).map(|_| r.below(classes as u64) as f64).collect();
    Dataset::from_parts(x, y, Task::Classification { num_classes: classes }).unwrap()
}

/// Explicit-loop forward pass, independent of the ndarray kernels.
fn forward_oracle(arch: &Architecture, params: &[f64], x: &[f64]) -> Vec<f64> {
    let widths = arch.widths();
    let mut a = x.to_vec();
    let mut off = 0;
    for k in 0..widths.len() - 1 {
        let (fi, fo) = (widths[k], widths[k + 1]);
        let mut z = vec![0.0; fo];
        for o in 0..fo {
            let mut acc = params[off + fi * fo + o];
            for j in 0..fi {
                acc += params[off + o * fi + j] * a[j];
            }
            z[o] = acc;
        }
        off += (fi + 1) * fo;
        a = if k + 2 < widths.len() {
            z.iter()
                .map(|&v| match arch.activation {
                    Activation::Relu => v.max(0.0),
                    Activation::Tanh => v.tanh(),
                })
                .collect()
        } else {
            z
        };
    }
    a
}

fn all_rows(ds: &Dataset) -> Vec<usize> {
    (0..ds.len()).collect()
}

#[test]
fn zero_network_outputs_zero() {
    let m = ModelState::zeros(Architecture::mlp(3, &[4, 4], Task::Regression)).unwrap();
    assert_eq!(m.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0]);
}

#[test]
fn linear_forward_is_dot_product() {
    let m = ModelState::new(Architecture::linear(2, Task::Regression), vec![1.0, 2.0, 0.0]).unwrap();
    assert_eq!(m.forward(&[3.0, 4.0]).unwrap(), vec![11.0]);
    assert!(matches!(
        m.forward(&[1.0]),
        Err(Error::DimensionMismatch { expected: 2, got: 1 })
    ));
}

#[test]
fn forward_matches_loop_oracle() {
    for act in [Activation::Relu, Activation::Tanh] {
        let arch = Architecture::mlp(5, &[7, 6], Task::Classification { num_classes: 3 }).with_activation(act);
        let m = ModelState::init(arch.clone(), 11).unwrap();
        let x = random_vec(5, 3);
        let got = m.forward(&x).unwrap();
        let want = forward_oracle(&arch, m.params(), &x);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn param_count_formula() {
    let arch = Architecture::mlp(8, &[128, 128], Task::Regression);
    assert_eq!(arch.param_count(), 9 * 128 + 129 * 128 + 129);
    assert_eq!(Architecture::default_mlp(8, Task::Regression), arch);
}

#[test]
fn losses_match_formulas() {
    let m = ModelState::new(Architecture::linear(2, Task::Regression), vec![1.0, 2.0, 0.5]).unwrap();
    assert_eq!(m.loss(&[3.0, 4.0], 11.5).unwrap(), 0.0);
    // f = 3 + 8 + 0.5 = 11.5; y = 10 -> 0.5 * 1.5^2
    assert!((m.loss(&[3.0, 4.0], 10.0).unwrap() - 1.125).abs() < 1e-15);

    let c = ModelState::zeros(Architecture::linear(2, Task::Classification { num_classes: 2 })).unwrap();
    assert!((c.loss(&[1.0, 1.0], 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

    let c3 = ModelState::init(Architecture::mlp(2, &[3], Task::Classification { num_classes: 3 }), 4).unwrap();
    let x = [0.3, -0.7];
    let o = c3.forward(&x).unwrap();
    let lse = o.iter().map(|v| v.exp()).sum::<f64>().ln();
    for y in 0..3 {
        let l = c3.loss(&x, y as f64).unwrap();
        assert!((l - (lse - o[y])).abs() < 1e-13);
        assert!(l >= 0.0);
    }
}

#[test]
fn zero_weights_give_zero_gradient() {
    let ds = regression_data(6, 3, 1);
    let m = ModelState::init(Architecture::mlp(3, &[4], Task::Regression), 2).unwrap();
    let g = m.grad(&ds, &all_rows(&ds), &[0.0; 6]).unwrap();
    assert!(g.iter().all(|&x| x == 0.0));
}

#[test]
fn linear_regression_gradient_by_hand() {
    let m = ModelState::new(Architecture::linear(2, Task::Regression), vec![0.5, -1.0, 0.25]).unwrap();
    let x = [2.0, 3.0];
    let y = 1.0;
    let resid = 0.5 * 2.0 - 3.0 + 0.25 - y;
    let g = m.instance_grad(&x, y).unwrap();
    assert_eq!(g, vec![resid * 2.0, resid * 3.0, resid]);
}

fn central_fd_grad(m: &ModelState, ds: &Dataset, rows: &[usize], w: &[f64], h: f64) -> Vec<f64> {
    let objective = |params: &[f64]| -> f64 {
        let mm = m.with_params(params.to_vec()).unwrap();
        mm.losses(ds, rows).unwrap().iter().zip(w).map(|(l, w)| l * w).sum()
    };
    let mut p = m.params().to_vec();
    (0..p.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + h;
            let up = objective(&p);
            p[k] = orig - h;
            let down = objective(&p);
            p[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[test]
fn gradient_matches_finite_differences() {
    for (task, ds) in [
        (Task::Regression, regression_data(8, 4, 5)),
        (Task::Classification { num_classes: 3 }, classification_data(8, 4, 3, 5)),
    ] {
        let arch = Architecture::mlp(4, &[6, 5], task).with_activation(Activation::Tanh);
        let m = ModelState::init(arch, 8).unwrap();
        let rows = all_rows(&ds);
        let w: Vec<f64> = (0..rows.len()).map(|k| 0.5 + k as f64 * 0.1).collect();
        let g = m.grad(&ds, &rows, &w).unwrap();
        let fd = central_fd_grad(&m, &ds, &rows, &w, 1e-5);
        assert!(rel_err(&g, &fd) < 1e-5, "{:?}: {}", task, rel_err(&g, &fd));
    }
}

#[test]
fn per_example_rows_sum_to_batch_gradient() {
    let ds = classification_data(9, 3, 2, 2);
    let m = ModelState::init(Architecture::mlp(3, &[5, 5], ds.task()), 1).unwrap();
    let rows = all_rows(&ds);
    let per = m.per_example_grads(&ds, &rows).unwrap();
    let total = m.grad(&ds, &rows, &vec![1.0; rows.len()]).unwrap();
    let summed = per.sum_axis(ndarray::Axis(0));
    for (a, b) in summed.iter().zip(&total) {
        assert!((a - b).abs() < 1e-10);
    }
    let single = m.grad(&ds, &[4], &[1.0]).unwrap();
    assert_eq!(per.row(4).to_vec(), single);
}

#[test]
fn identical_instances_have_identical_rows() {
    let ds = regression_data(5, 2, 3);
    let m = ModelState::init(Architecture::mlp(2, &[3], Task::Regression), 1).unwrap();
    let per = m.per_example_grads(&ds, &[2, 2]).unwrap();
    assert_eq!(per.row(0), per.row(1));
}

#[test]
fn hvp_of_zero_is_zero() {
    let ds = regression_data(5, 2, 3);
    let m = ModelState::init(Architecture::mlp(2, &[3], Task::Regression), 1).unwrap();
    let hv = m.hvp(&ds, &all_rows(&ds), &[1.0; 5], &vec![0.0; m.param_count()]).unwrap();
    assert!(hv.iter().all(|&x| x == 0.0));
}

#[test]
fn linear_regression_hvp_matches_dense_hessian() {
    let d = 5;
    let ds = regression_data(12, d, 7);
    let m = ModelState::init(Architecture::linear(d, Task::Regression), 3).unwrap();
    let p = d + 1;
    // H = sum_i xt xt^T with xt = [x, 1]
    let mut h = vec![vec![0.0; p]; p];
    for i in 0..ds.len() {
        let mut xt = ds.row(i).to_vec();
        xt.push(1.0);
        for a in 0..p {
            for b in 0..p {
                h[a][b] += xt[a] * xt[b];
            }
        }
    }
    let v = random_vec(p, 4);
    let want: Vec<f64> = h.iter().map(|row| dot(row, &v)).collect();
    let got = m.hvp(&ds, &all_rows(&ds), &vec![1.0; ds.len()], &v).unwrap();
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn hvp_matches_gradient_differences() {
    for (task, ds) in [
        (Task::Regression, regression_data(10, 3, 8)),
        (Task::Classification { num_classes: 2 }, classification_data(10, 3, 2, 8)),
    ] {
        let m = ModelState::init(
            Architecture::mlp(3, &[6, 4], task).with_activation(Activation::Tanh),
            2,
        )
        .unwrap();
        let rows = all_rows(&ds);
        let w = vec![1.0; rows.len()];
        let v = random_vec(m.param_count(), 5);
        let eps = 1e-5;
        let up = m.shifted(&v, eps).unwrap().grad(&ds, &rows, &w).unwrap();
        let down = m.shifted(&v, -eps).unwrap().grad(&ds, &rows, &w).unwrap();
        let fd: Vec<f64> = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        let hv = m.hvp(&ds, &rows, &w, &v).unwrap();
        assert!(rel_err(&hv, &fd) < 1e-4, "{task:?}: {}", rel_err(&hv, &fd));
    }
}

#[test]
fn gnvp_rank_one_and_orthogonal_cases() {
    let g = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, -1.0]).unwrap();
    let ctx = GaussNewtonContext::from_parts(g, vec![0.5], vec![2.0], vec![0]).unwrap();
    let v = [0.5, -1.0, 3.0];
    let gv = 0.5 - 2.0 - 3.0;
    assert_eq!(ctx.gnvp(&v), vec![2.0 * gv, 2.0 * gv * 2.0, -2.0 * gv]);
    assert_eq!(ctx.gnvp(&[2.0, -1.0, 0.0]), vec![0.0; 3]);
}

#[test]
fn gnvp_matches_dense_product_and_is_psd() {
    let ds = classification_data(15, 3, 2, 4);
    let m = ModelState::init(Architecture::mlp(3, &[4], ds.task()), 6).unwrap();
    let ctx = GaussNewtonContext::build(&m, &ds, &all_rows(&ds)).unwrap();
    let p = m.param_count();
    let mut dense = vec![vec![0.0; p]; p];
    for i in 0..ctx.len() {
        let gi = ctx.g_row(i);
        for a in 0..p {
            for b in 0..p {
                dense[a][b] += ctx.v()[i] * gi[a] * gi[b];
            }
        }
    }
    for seed in 0..4 {
        let v = random_vec(p, seed);
        let got = ctx.gnvp(&v);
        for (a, row) in got.iter().zip(&dense) {
            assert!((a - dot(row, &v)).abs() < 1e-10);
        }
        assert!(dot(&v, &got) >= -1e-10 * dot(&v, &v));
    }
}

#[test]
fn mse_gauss_newton_equals_hessian_for_linear_model() {
    let ds = regression_data(20, 4, 2);
    let m = ModelState::init(Architecture::linear(4, Task::Regression), 1).unwrap();
    let rows = all_rows(&ds);
    let ctx = GaussNewtonContext::build(&m, &ds, &rows).unwrap();
    assert!(ctx.v().iter().all(|&v| v == 1.0));
    for (k, &i) in rows.iter().enumerate() {
        let f = m.forward(&ds.row(i).to_vec()).unwrap()[0];
        assert!((ctx.r()[k] + (f - ds.target(i))).abs() < 1e-12);
    }
    for seed in 0..3 {
        let v = random_vec(m.param_count(), seed);
        let a = ctx.gnvp(&v);
        let b = m.hvp(&ds, &rows, &vec![1.0; rows.len()], &v).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn gauss_newton_dense_identity_on_small_mlp() {
    // p <= 200: G^T G assembled densely from per-row f-gradients agrees with gnvp.
    let ds = regression_data(30, 3, 9);
    let m = ModelState::init(Architecture::mlp(3, &[8, 8], Task::Regression), 4).unwrap();
    assert!(m.param_count() <= 200);
    let rows = all_rows(&ds);
    let ctx = GaussNewtonContext::build(&m, &ds, &rows).unwrap();
    let per = m.per_example_grads(&ds, &rows).unwrap();
    // For MSE, grad L_i = (f_i - y_i) grad f_i, so g_i = grad L_i / (f_i - y_i).
    for (k, &i) in rows.iter().enumerate() {
        let resid = -ctx.r()[k];
        if resid.abs() > 1e-3 {
            for (a, b) in per.row(k).iter().zip(ctx.g_row(k)) {
                assert!((a / resid - b).abs() < 1e-8 * (1.0 + b.abs()), "row {i}");
            }
        }
    }
    let gtg = ctx.g().t().dot(ctx.g());
    let v = random_vec(m.param_count(), 1);
    let dense = gtg.dot(&ndarray::Array1::from(v.clone()));
    for (a, b) in ctx.gnvp(&v).iter().zip(dense.iter()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn scalar_output_special_cases() {
    let m = ModelState::new(Architecture::linear(1, Task::Regression), vec![2.0, 0.0]).unwrap();
    let s = m.scalar_output(&[1.5], 3.0).unwrap();
    assert_eq!((s.value, s.d_loss, s.d2_loss), (0.0, 0.0, 1.0));

    let c = ModelState::zeros(Architecture::linear(2, Task::Classification { num_classes: 2 })).unwrap();
    let s = c.scalar_output(&[0.4, -1.0], 1.0).unwrap();
    assert_eq!(s.value, 0.0);
    assert!((s.d_loss + 0.5).abs() < 1e-15);
    assert!((s.d2_loss - 0.25).abs() < 1e-15);
}

#[test]
fn chain_rule_links_loss_and_scalar_output() {
    for classes in [2, 4] {
        let ds = classification_data(6, 3, classes, 10 + classes as u64);
        let m = ModelState::init(Architecture::mlp(3, &[5], ds.task()), 3).unwrap();
        let rows = all_rows(&ds);
        let per = m.per_example_grads(&ds, &rows).unwrap();
        let (g, parts) = m.scalar_output_grads(&ds, &rows).unwrap();
        for k in 0..rows.len() {
            let chain: Vec<f64> = g.row(k).iter().map(|x| parts[k].d_loss * x).collect();
            assert!(rel_err(&chain, &per.row(k).to_vec()) < 1e-8);
            assert!(parts[k].d2_loss >= 0.0);
            // lbar(fbar) reproduces the cross-entropy
            let loss = m.loss(&ds.row(rows[k]).to_vec(), ds.target(rows[k])).unwrap();
            assert!((loss - (1.0 + (-parts[k].value).exp()).ln()).abs() < 1e-12);
        }
    }
}

#[test]
fn model_file_round_trip_is_bit_exact() {
    let m = ModelState::init(
        Architecture::mlp(3, &[4, 2], Task::Classification { num_classes: 2 }).with_activation(Activation::Tanh),
        77,
    )
    .unwrap();
    let text = m.to_text();
    let back = ModelState::from_text(&text).unwrap();
    assert_eq!(back.arch(), m.arch());
    for (a, b) in back.params().iter().zip(m.params()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert!(ModelState::from_text("nonsense").is_err());
    let truncated: String = text.lines().take(8).collect::<Vec<_>>().join("\n");
    assert!(ModelState::from_text(&truncated).is_err());
}

#[test]
fn init_is_seeded_and_bounded() {
    let arch = Architecture::mlp(4, &[9], Task::Regression);
    let a = ModelState::init(arch.clone(), 5).unwrap();
    assert_eq!(a, ModelState::init(arch.clone(), 5).unwrap());
    assert_ne!(a, ModelState::init(arch, 6).unwrap());
    assert!(a.params()[..4 * 9 + 9].iter().all(|x| x.abs() <= 0.5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hvp_is_symmetric(seed in 0u64..1000) {
        let ds = classification_data(7, 3, 3, seed);
        let m = ModelState::init(
            Architecture::mlp(3, &[5, 4], ds.task()).with_activation(Activation::Tanh),
            seed,
        ).unwrap();
        let rows: Vec<usize> = (0..ds.len()).collect();
        let w = vec![1.0; rows.len()];
        let u = random_vec(m.param_count(), seed + 1);
        let v = random_vec(m.param_count(), seed + 2);
        let hu = m.hvp(&ds, &rows, &w, &u).unwrap();
        let hv = m.hvp(&ds, &rows, &w, &v).unwrap();
        prop_assert!((dot(&u, &hv) - dot(&v, &hu)).abs() < 1e-8 * (1.0 + dot(&u, &hv).abs()));
    }

    #[test]
    fn hvp_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0) {
        let ds = regression_data(6, 2, seed);
        let m = ModelState::init(Architecture::mlp(2, &[4], Task::Regression).with_activation(Activation::Tanh), seed).unwrap();
        let rows: Vec<usize> = (0..ds.len()).collect();
        let w = vec![1.0; rows.len()];
        let u = random_vec(m.param_count(), seed + 1);
        let v = random_vec(m.param_count(), seed + 2);
        let combo: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + b).collect();
        let lhs = m.hvp(&ds, &rows, &w, &combo).unwrap();
        let hu = m.hvp(&ds, &rows, &w, &u).unwrap();
        let hv = m.hvp(&ds, &rows, &w, &v).unwrap();
        for k in 0..lhs.len() {
            prop_assert!((lhs[k] - (alpha * hu[k] + hv[k])).abs() < 1e-9 * (1.0 + lhs[k].abs()));
        }
    }

    #[test]
    fn quadratic_model_gradient_is_affine(seed in 0u64..1000, alpha in 0.0f64..1.0) {
        let ds = regression_data(8, 3, seed);
        let arch = Architecture::linear(3, Task::Regression);
        let a = ModelState::init(arch.clone(), seed).unwrap();
        let b = ModelState::init(arch, seed + 1).unwrap();
        let mix: Vec<f64> = a.params().iter().zip(b.params()).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect();
        let rows: Vec<usize> = (0..ds.len()).collect();
        let w = vec![1.0; rows.len()];
        let gm = a.with_params(mix).unwrap().grad(&ds, &rows, &w).unwrap();
        let ga = a.grad(&ds, &rows, &w).unwrap();
        let gb = b.grad(&ds, &rows, &w).unwrap();
        for k in 0..gm.len() {
            prop_assert!((gm[k] - (alpha * ga[k] + (1.0 - alpha) * gb[k])).abs() < 1e-9);
        }
    }
}
