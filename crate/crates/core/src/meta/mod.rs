//! Episodic two-stage training of a shared adapter set.
//!
//! Each iteration adapts a throwaway clone of the shared adapters to every
//! sampled task with a few plain gradient steps on its support set, then
//! averages the query-set gradients taken at the adapted values and feeds the
//! mean to one AdamW step on the shared adapters. No derivatives flow through
//! the inner steps.

mod eval;
mod trainer;

pub use eval::{adapt_and_score, evaluate_held_out, EvalConfig, HeldOutScore, SeedScore};
pub use trainer::{
    iteration_batch, run_joint_baseline, run_meta_training, run_sta_training, run_training, worker_threads, TrainMethod,
    TrainOutcome, TrainRecord, Trainer,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lora::{AdapterGrads, AdapterSet, LoraError};
use crate::nn::{self, sgd_step, AdamWConfig, AdamWState, BindAdapters, Input, Loss, Model, NnError, Target};
use crate::tasks::{Example, TaskError};
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error("diverged at iteration {iteration}{}: {detail}", task.map(|t| format!(", task {t}")).unwrap_or_default())]
    Diverged {
        iteration: u64,
        task: Option<u64>,
        detail: String,
    },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T, E = MetaError> = std::result::Result<T, E>;

impl From<TensorError> for MetaError {
    fn from(e: TensorError) -> Self {
        MetaError::Nn(NnError::Tensor(e))
    }
}

impl MetaError {
    fn is_non_finite(&self) -> bool {
        matches!(
            self,
            MetaError::Nn(NnError::Tensor(TensorError::NonFinite { .. }))
                | MetaError::Lora(LoraError::Nn(NnError::Tensor(TensorError::NonFinite { .. })))
                | MetaError::Lora(LoraError::Tensor(TensorError::NonFinite { .. }))
        )
    }

    /// Attaches iteration and task context to divergence errors raised deeper down.
    pub(crate) fn in_context(self, iteration: u64, task: Option<u64>) -> Self {
        match self {
            MetaError::Diverged { detail, .. } => MetaError::Diverged {
                iteration,
                task,
                detail,
            },
            other if other.is_non_finite() => MetaError::Diverged {
                iteration,
                task,
                detail: other.to_string(),
            },
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner (task-specific) SGD step size.
    pub inner_lr: f64,
    /// Outer AdamW step size.
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub tasks_per_iteration: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub iterations: u64,
    pub seed: u64,
    /// Lets the no-adaptation variant also train on support examples.
    #[serde(default)]
    pub sta_include_support: bool,
    #[serde(default)]
    pub adamw: AdamWConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_lr: 1e-2,
            outer_lr: 1e-3,
            inner_steps: 3,
            tasks_per_iteration: 2,
            support_size: 8,
            query_size: 8,
            iterations: 1000,
            seed: 0,
            sta_include_support: false,
            adamw: AdamWConfig::default(),
        }
    }
}

impl MetaConfig {
    /// Step sizes tuned for billion-parameter models; far too small here.
    pub fn large_model() -> Self {
        Self {
            inner_lr: 5e-6,
            outer_lr: 2e-6,
            ..Self::default()
        }
    }

    /// The learning-rate sensitivity grid around this config:
    /// base, (0.4a, 2.5b), (10a, 10b), (0.1a, 0.1b).
    pub fn lr_grid(&self) -> Vec<(String, MetaConfig)> {
        let with = |fa: f64, fb: f64| MetaConfig {
            inner_lr: self.inner_lr * fa,
            outer_lr: self.outer_lr * fb,
            ..self.clone()
        };
        vec![
            ("c_base".into(), self.clone()),
            ("c1".into(), with(0.4, 2.5)),
            ("c2".into(), with(10.0, 10.0)),
            ("c3".into(), with(0.1, 0.1)),
        ]
    }

    /// Field-level checks; `task_count` is the size of the training pool.
    pub fn validate(&self, task_count: usize) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [("inner_lr", self.inner_lr), ("outer_lr", self.outer_lr)] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.tasks_per_iteration == 0 || self.tasks_per_iteration > task_count {
            problems.push(format!(
                "tasks_per_iteration must be in 1..={task_count}, got {}",
                self.tasks_per_iteration
            ));
        }
        if self.support_size == 0 {
            problems.push("support_size must be >= 1".into());
        }
        if self.query_size == 0 {
            problems.push("query_size must be >= 1".into());
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            problems.push("adamw betas must lie in [0, 1)".into());
        }
        if !(a.eps.is_finite() && a.eps > 0.0) {
            problems.push("adamw.eps must be positive".into());
        }
        if !(a.weight_decay.is_finite() && a.weight_decay >= 0.0) {
            problems.push("adamw.weight_decay must be >= 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(MetaError::Config(problems.join("; ")))
        }
    }

    /// Examples drawn per iteration, `n * (n_s + n_q)`.
    pub fn examples_per_iteration(&self) -> u64 {
        (self.tasks_per_iteration * (self.support_size + self.query_size)) as u64
    }
}

fn split(examples: &[Example]) -> (Vec<Input>, Vec<Target>) {
    examples.iter().map(|e| (e.input.clone(), e.target.clone())).unzip()
}

/// Mean loss of the adapted model over `examples`, no gradients.
pub fn support_loss(model: &Model, adapters: &AdapterSet, examples: &[Example], loss: Loss) -> Result<f64> {
    if examples.is_empty() {
        return Err(MetaError::Contract("empty support set".into()));
    }
    let (inputs, targets) = split(examples);
    let mut tape = Tape::new();
    let vars = adapters.bind(&mut tape, false);
    let pred = model.forward_batch(&mut tape, &inputs, Some(&vars))?;
    let l = loss.apply(&mut tape, pred, &targets)?;
    Ok(tape.value(l).item()?)
}

/// Mean loss over `examples` and its gradient with respect to every adapter
/// factor, the current values taken as fresh leaves.
pub fn loss_and_grad(
    model: &Model,
    adapters: &AdapterSet,
    examples: &[Example],
    loss: Loss,
) -> Result<(f64, AdapterGrads)> {
    if examples.is_empty() {
        return Err(MetaError::Contract("empty example set".into()));
    }
    let (inputs, targets) = split(examples);
    let mut tape = Tape::new().with_finite_check(true);
    let vars = adapters.bind(&mut tape, true);
    let pred = model.forward_batch(&mut tape, &inputs, Some(&vars))?;
    let l = loss.apply(&mut tape, pred, &targets)?;
    tape.backward(l)?;
    let value = tape.value(l).item()?;
    let grads = adapters.grads_from(&tape, &vars)?;
    Ok((value, grads))
}

/// Clones `shared` and takes `k` SGD steps on the support loss.
///
/// Returns the adapted set and the support loss before each step plus after
/// the last one (`k + 1` values).
pub fn inner_adapt(
    model: &Model,
    shared: &AdapterSet,
    support: &[Example],
    loss: Loss,
    inner_lr: f64,
    steps: usize,
) -> Result<(AdapterSet, Vec<f64>)> {
    if support.is_empty() {
        return Err(MetaError::Contract("empty support set".into()));
    }
    let mut local = shared.clone_local();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let diverged = |detail: String| MetaError::Diverged {
            iteration: 0,
            task: None,
            detail: format!("inner step {step}: {detail}"),
        };
        let (l, g) = loss_and_grad(model, &local, support, loss).map_err(|e| {
            if e.is_non_finite() {
                diverged(e.to_string())
            } else {
                e
            }
        })?;
        losses.push(l);
        sgd_step(&mut local.params_mut(), &g.refs(), inner_lr)?;
        if !local.params().iter().all(|p| p.is_finite()) {
            return Err(diverged("adapter parameters became non-finite".into()));
        }
    }
    let last = support_loss(model, &local, support, loss)?;
    if !last.is_finite() {
        return Err(MetaError::Diverged {
            iteration: 0,
            task: None,
            detail: format!("support loss after step {steps} is {last}"),
        });
    }
    losses.push(last);
    Ok((local, losses))
}

/// Gradient of the mean query loss at the adapted values, taken as leaves.
pub fn query_gradient(
    model: &Model,
    adapted: &AdapterSet,
    query: &[Example],
    loss: Loss,
) -> Result<(f64, AdapterGrads)> {
    if query.is_empty() {
        return Err(MetaError::Contract("empty query set".into()));
    }
    loss_and_grad(model, adapted, query, loss)
}

/// Averages `grads` in list order and applies one AdamW step to `shared`.
/// Returns the averaged gradient that was applied.
pub fn meta_update(
    shared: &mut AdapterSet,
    grads: &[AdapterGrads],
    state: &mut AdamWState,
    outer_lr: f64,
) -> Result<AdapterGrads> {
    if grads.is_empty() {
        return Err(MetaError::Contract("no task gradients to average".into()));
    }
    let names = shared.param_names();
    if let Some(bad) = grads.iter().find(|g| g.names != names) {
        return Err(MetaError::Contract(format!(
            "gradient set {:?} does not match shared parameters {:?}",
            bad.names, names
        )));
    }
    let mean = AdapterGrads::mean(grads)?;
    nn::adamw_step(&mut shared.params_mut(), &mean.refs(), state, outer_lr)?;
    Ok(mean)
}

pub(crate) fn adam_state_for(shared: &AdapterSet, config: AdamWConfig) -> AdamWState {
    AdamWState::for_params(&shared.params(), config)
}
