//! Deterministic seeded mini-batch training, with optional leave-one-out
//! loss subtraction, used both for the original fit and for further training.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::rng::{Domain, SeededRng};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
    #[serde(rename = "adamw")]
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointEvery {
    Epochs(usize),
    Steps(usize),
}

impl Default for CheckpointEvery {
    fn default() -> Self {
        CheckpointEvery::Epochs(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    #[serde(default)]
    pub optimizer: Optimizer,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub shuffle_seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub checkpoint_every: CheckpointEvery,
}

impl TrainPlan {
    pub fn sgd(lr: f64, epochs: usize, batch_size: usize) -> Self {
        Self {
            optimizer: Optimizer::Sgd,
            lr,
            epochs,
            batch_size,
            shuffle_seed: 0,
            weight_decay: 0.0,
            checkpoint_every: CheckpointEvery::Epochs(1),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.shuffle_seed = seed;
        self
    }

    pub fn with_checkpoints(mut self, every: CheckpointEvery) -> Self {
        self.checkpoint_every = every;
        self
    }

    /// The further-training counterpart: same plan with the learning rate
    /// divided by ten.
    pub fn further_training_default(&self, epochs: usize) -> Self {
        Self {
            lr: self.lr / 10.0,
            epochs,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be > 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight decay must be >= 0".into()));
        }
        match self.checkpoint_every {
            CheckpointEvery::Epochs(0) | CheckpointEvery::Steps(0) => {
                Err(Error::InvalidArgument("checkpoint interval must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Batches per epoch, `ceil(n / B)`; the last partial batch is kept.
    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// Step indices (after that many updates) at which checkpoints fall for
    /// a dataset of `n` rows. The final step is always included.
    pub fn checkpoint_steps(&self, n: usize) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch(n);
        let total = per_epoch * self.epochs;
        let mut steps: Vec<usize> = match self.checkpoint_every {
            CheckpointEvery::Epochs(e) => (1..=self.epochs)
                .filter(|ep| ep % e == 0)
                .map(|ep| ep * per_epoch)
                .collect(),
            CheckpointEvery::Steps(s) => (1..=total).filter(|st| st % s == 0).collect(),
        };
        if steps.last() != Some(&total) {
            steps.push(total);
        }
        steps
    }
}

/// Instance order for one epoch: a uniform permutation drawn from stream
/// `epoch` of the shuffle domain of `seed`.
pub fn shuffle_order(n: usize, epoch: usize, seed: u64) -> Vec<usize> {
    SeededRng::new(seed, Domain::Shuffle, epoch as u64).permutation(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub steps: usize,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(p: usize) -> Self {
        Self {
            steps: 0,
            first_moment: vec![0.0; p],
            second_moment: vec![0.0; p],
        }
    }
}

/// Applies one update given the batch gradient. SGD and Adam add
/// `weight_decay * theta` to the gradient; AdamW decays the parameters
/// directly (decoupled).
pub fn apply_update(params: &mut [f64], grad: &[f64], state: &mut OptimizerState, plan: &TrainPlan) {
    state.steps += 1;
    let lr = plan.lr;
    let wd = plan.weight_decay;
    match plan.optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.iter_mut().zip(grad) {
                *p -= lr * (g + wd * *p);
            }
        }
        Optimizer::Adam | Optimizer::AdamW => {
            let t = state.steps as i32;
            let bc1 = 1.0 - ADAM_BETA1.powi(t);
            let bc2 = 1.0 - ADAM_BETA2.powi(t);
            let decoupled = plan.optimizer == Optimizer::AdamW;
            for k in 0..params.len() {
                let g = if decoupled { grad[k] } else { grad[k] + wd * params[k] };
                let m = &mut state.first_moment[k];
                let v = &mut state.second_moment[k];
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                if decoupled {
                    params[k] -= lr * wd * params[k];
                }
                params[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Gradient of one mini-batch objective: the mean loss over `batch`, minus
/// `L(z_loo) / n` when a left-out instance is given.
pub fn batch_gradient(model: &ModelState, ds: &Dataset, batch: &[usize], loo: Option<usize>) -> Result<Vec<f64>> {
    let mut rows = batch.to_vec();
    let mut weights = vec![1.0 / batch.len() as f64; batch.len()];
    if let Some(i) = loo {
        rows.push(i);
        weights.push(-1.0 / ds.len() as f64);
    }
    model.grad(ds, &rows, &weights)
}

/// One optimizer step on `batch`, mutating `model` in place.
pub fn step(
    model: &mut ModelState,
    ds: &Dataset,
    batch: &[usize],
    loo: Option<usize>,
    state: &mut OptimizerState,
    plan: &TrainPlan,
) -> Result<()> {
    let grad = batch_gradient(model, ds, batch, loo)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged { step: state.steps + 1 });
    }
    apply_update(model.params_mut(), &grad, state, plan);
    if model.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Diverged { step: state.steps });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub model: ModelState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub checkpoints: Vec<Checkpoint>,
    pub final_model: ModelState,
    /// Mean training loss over `ds` after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Runs the plan and keeps full model snapshots at every checkpoint.
pub fn train(init: &ModelState, ds: &Dataset, plan: &TrainPlan, loo: Option<usize>) -> Result<Trajectory> {
    let mut checkpoints = Vec::new();
    let mut epoch_losses = Vec::new();
    let final_model = train_with(init, ds, plan, loo, |event| {
        match event {
            TrainEvent::Checkpoint { step, model } => checkpoints.push(Checkpoint {
                step,
                model: model.clone(),
            }),
            TrainEvent::EpochEnd { model, .. } => {
                let rows: Vec<usize> = (0..ds.len()).collect();
                let losses = model.losses(ds, &rows)?;
                epoch_losses.push(losses.iter().sum::<f64>() / losses.len().max(1) as f64);
            }
        }
        Ok(())
    })?;
    Ok(Trajectory {
        checkpoints,
        final_model,
        epoch_losses,
    })
}

pub enum TrainEvent<'a> {
    Checkpoint { step: usize, model: &'a ModelState },
    EpochEnd { epoch: usize, model: &'a ModelState },
}

/// Streaming variant of [`train`]: reports checkpoints and epoch ends to
/// `observer` instead of storing snapshots, and returns the final model.
pub fn train_with<F>(
    init: &ModelState,
    ds: &Dataset,
    plan: &TrainPlan,
    loo: Option<usize>,
    mut observer: F,
) -> Result<ModelState>
where
    F: FnMut(TrainEvent<'_>) -> Result<()>,
{
    plan.validate()?;
    if let Some(i) = loo {
        if i >= ds.len() {
            return Err(Error::InvalidArgument(format!(
                "left-out index {i} out of range ({} rows)",
                ds.len()
            )));
        }
    }
    let n = ds.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let checkpoints = plan.checkpoint_steps(n);
    let mut next_checkpoint = 0;
    let mut model = init.clone();
    let mut state = OptimizerState::new(model.param_count());

    if checkpoints.first() == Some(&0) {
        observer(TrainEvent::Checkpoint { step: 0, model: &model })?;
        next_checkpoint += 1;
    }
    for epoch in 0..plan.epochs {
        let order = shuffle_order(n, epoch, plan.shuffle_seed);
        for batch in order.chunks(plan.batch_size) {
            step(&mut model, ds, batch, loo, &mut state, plan)?;
            if checkpoints.get(next_checkpoint) == Some(&state.steps) {
                observer(TrainEvent::Checkpoint {
                    step: state.steps,
                    model: &model,
                })?;
                next_checkpoint += 1;
            }
        }
        observer(TrainEvent::EpochEnd { epoch, model: &model })?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind, Task};
    use crate::model::Architecture;

    fn linear_data(n: usize, noise: f64) -> Dataset {
        make_synthetic(
            &SyntheticKind::LinearRegression {
                weights: Some(vec![2.0]),
            },
            n,
            1,
            noise,
            3,
        )
        .unwrap()
        .0
    }

    #[test]
    fn shuffle_order_pinned_and_deterministic() {
        assert_eq!(shuffle_order(1, 0, 0), vec![0]);
        assert_eq!(shuffle_order(8, 0, 0), shuffle_order(8, 0, 0));
        let e0 = shuffle_order(8, 0, 0);
        let e1 = shuffle_order(8, 1, 0);
        assert_ne!(e0, e1);
        assert_eq!(e0, PINNED_EPOCH0);
        assert_eq!(e1, PINNED_EPOCH1);
        let mut sorted = e0.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
    }

    const PINNED_EPOCH0: [usize; 8] = [6, 0, 3, 4, 7, 2, 1, 5];
    const PINNED_EPOCH1: [usize; 8] = [1, 7, 4, 6, 2, 3, 0, 5];

    #[test]
    fn zero_epochs_returns_init() {
        let ds = linear_data(10, 0.0);
        let init = ModelState::init(Architecture::linear(1, Task::Regression), 1).unwrap();
        let traj = train(&init, &ds, &TrainPlan::sgd(0.1, 0, 4), None).unwrap();
        assert_eq!(traj.final_model, init);
        assert_eq!(traj.checkpoints.len(), 1);
        assert_eq!(traj.checkpoints[0].step, 0);
    }

    #[test]
    fn full_batch_gd_converges_to_least_squares() {
        let ds = linear_data(20, 0.0);
        let init = ModelState::zeros(Architecture::linear(1, Task::Regression)).unwrap();
        let plan = TrainPlan::sgd(0.5, 400, 20);
        let fin = train(&init, &ds, &plan, None).unwrap().final_model;
        assert!((fin.params()[0] - 2.0).abs() < 1e-6, "{:?}", fin.params());
        assert!(fin.params()[1].abs() < 1e-6);
    }

    #[test]
    fn single_batch_loo_gradient_matches_weighted_oracle() {
        let ds = linear_data(6, 0.3);
        let n = ds.len() as f64;
        let m = ModelState::init(Architecture::linear(1, Task::Regression), 2).unwrap();
        let all: Vec<usize> = (0..6).collect();
        let i = 3;
        let got = batch_gradient(&m, &ds, &all, Some(i)).unwrap();
        // weights: 1/n everywhere (mean over the single batch), minus n_B/n = 1/n on z_i
        let mut w = vec![1.0 / n; 6];
        w[i] -= 1.0 / n;
        let want = m.grad(&ds, &all, &w).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
        // i.e. exactly the mean-reduced gradient of D without z_i, rescaled by (n-1)/n
        let rest: Vec<usize> = all.iter().copied().filter(|&k| k != i).collect();
        let minus_i = m.grad(&ds, &rest, &[1.0 / n; 5]).unwrap();
        for (a, b) in got.iter().zip(&minus_i) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn sgd_step_by_hand() {
        let plan = TrainPlan::sgd(0.1, 1, 1);
        let mut p = vec![1.0, 1.0];
        let mut st = OptimizerState::new(2);
        apply_update(&mut p, &[1.0, -2.0], &mut st, &plan);
        assert!((p[0] - 0.9).abs() < 1e-15 && (p[1] - 1.2).abs() < 1e-15);
        let mut q = vec![3.0, -4.0];
        apply_update(&mut q, &[0.0, 0.0], &mut st, &plan);
        assert_eq!(q, vec![3.0, -4.0]);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let plan = TrainPlan {
            optimizer: Optimizer::Adam,
            ..TrainPlan::sgd(0.01, 1, 1)
        };
        let g = [0.5, -3.0, 1e-3];
        let mut p = vec![0.0; 3];
        let mut st = OptimizerState::new(3);
        apply_update(&mut p, &g, &mut st, &plan);
        for k in 0..3 {
            // m_hat = g, v_hat = g^2 after bias correction
            let m_hat = (1.0 - ADAM_BETA1) * g[k] / (1.0 - ADAM_BETA1);
            let v_hat = (1.0 - ADAM_BETA2) * g[k] * g[k] / (1.0 - ADAM_BETA2);
            let want = -0.01 * m_hat / (v_hat.sqrt() + ADAM_EPS);
            assert!((p[k] - want).abs() < 1e-15);
            assert!((p[k] + 0.01 * g[k].signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn adamw_decouples_weight_decay() {
        let base = TrainPlan {
            weight_decay: 0.1,
            ..TrainPlan::sgd(0.01, 1, 1)
        };
        let adamw = TrainPlan {
            optimizer: Optimizer::AdamW,
            ..base.clone()
        };
        let mut p = vec![2.0];
        let mut st = OptimizerState::new(1);
        apply_update(&mut p, &[0.0], &mut st, &adamw);
        assert!((p[0] - (2.0 - 0.01 * 0.1 * 2.0)).abs() < 1e-15);

        let adam = TrainPlan {
            optimizer: Optimizer::Adam,
            ..base
        };
        let mut q = vec![2.0];
        let mut st = OptimizerState::new(1);
        apply_update(&mut q, &[0.0], &mut st, &adam);
        // coupled: gradient 0.2, normalized step of lr
        assert!((q[0] - (2.0 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn training_is_bitwise_deterministic_and_seed_sensitive() {
        let ds = linear_data(30, 0.5);
        let init = ModelState::init(Architecture::mlp(1, &[4], Task::Regression), 3).unwrap();
        let plan = TrainPlan::sgd(0.05, 3, 7).with_seed(11);
        let a = train(&init, &ds, &plan, Some(4)).unwrap();
        let b = train(&init, &ds, &plan, Some(4)).unwrap();
        assert_eq!(a, b);
        let c = train(&init, &ds, &plan.clone().with_seed(12), Some(4)).unwrap();
        assert_ne!(a.final_model.params(), c.final_model.params());
    }

    #[test]
    fn checkpoint_schedule() {
        let plan = TrainPlan::sgd(0.1, 3, 4);
        assert_eq!(plan.checkpoint_steps(10), vec![3, 6, 9]);
        let plan = plan.with_checkpoints(CheckpointEvery::Steps(4));
        assert_eq!(plan.checkpoint_steps(10), vec![4, 8, 9]);
        let plan = TrainPlan::sgd(0.1, 5, 10).with_checkpoints(CheckpointEvery::Epochs(2));
        assert_eq!(plan.checkpoint_steps(10), vec![2, 4, 5]);
    }

    #[test]
    fn trajectory_checkpoints_increase() {
        let ds = linear_data(10, 0.1);
        let init = ModelState::init(Architecture::linear(1, Task::Regression), 1).unwrap();
        let traj = train(&init, &ds, &TrainPlan::sgd(0.1, 4, 3), None).unwrap();
        let steps: Vec<usize> = traj.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![4, 8, 12, 16]);
        assert_eq!(traj.epoch_losses.len(), 4);
        assert_eq!(traj.checkpoints.last().unwrap().model, traj.final_model);
    }

    #[test]
    fn divergence_reports_step() {
        let ds = linear_data(10, 0.1);
        let init = ModelState::init(Architecture::mlp(1, &[8], Task::Regression), 1).unwrap();
        let err = train(&init, &ds, &TrainPlan::sgd(1e6, 50, 10), None).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn invalid_plans_rejected() {
        let ds = linear_data(10, 0.1);
        let init = ModelState::init(Architecture::linear(1, Task::Regression), 1).unwrap();
        assert!(train(&init, &ds, &TrainPlan::sgd(0.0, 1, 1), None).is_err());
        assert!(train(&init, &ds, &TrainPlan::sgd(0.1, 1, 0), None).is_err());
        assert!(train(&init, &ds, &TrainPlan::sgd(0.1, 1, 1), Some(10)).is_err());
    }

    #[test]
    fn convex_further_training_matches_retraining() {
        // Strictly convex risk: starting point does not matter.
        let ds = make_synthetic(&SyntheticKind::LinearRegression { weights: None }, 40, 3, 0.5, 8)
            .unwrap()
            .0;
        let arch = Architecture::linear(3, Task::Regression);
        let plan = TrainPlan::sgd(0.5, 2000, 40);
        let scratch = train(&ModelState::zeros(arch.clone()).unwrap(), &ds, &plan, None)
            .unwrap()
            .final_model;
        let other = ModelState::init(arch, 99).unwrap();
        let further = train(&other, &ds, &plan, None).unwrap().final_model;
        for (a, b) in scratch.params().iter().zip(further.params()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn two_gaussians_are_linearly_separable() {
        // Logistic-regression oracle reaches 100% training accuracy.
        let (ds, _) = make_synthetic(&SyntheticKind::TwoGaussians { separation: 10.0 }, 60, 3, 0.1, 2)
            .unwrap();
        let init = ModelState::zeros(Architecture::linear(3, ds.task())).unwrap();
        let fin = train(&init, &ds, &TrainPlan::sgd(0.1, 20, 10), None).unwrap().final_model;
        for i in 0..ds.len() {
            let o = fin.forward(&ds.row(i).to_vec()).unwrap();
            let pred = if o[1] > o[0] { 1.0 } else { 0.0 };
            assert_eq!(pred, ds.target(i));
        }
    }
}
