use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    adam_state_for, inner_adapt, loss_and_grad, meta_update, query_gradient, support_loss, MetaConfig, MetaError,
    Result,
};
use crate::lora::{AdapterGrads, AdapterSet};
use crate::nn::{AdamWState, Model};
use crate::tasks::{sample_task_batch, training_episode_index, Episode, EpisodeSource, Example};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    /// Inner adaptation then first-order outer step.
    Meta,
    /// Outer step on query gradients at the shared values, no inner loop.
    Sta,
    /// One step on the pooled loss of every sampled example.
    Joint,
}

impl TrainMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMethod::Meta => "meta",
            TrainMethod::Sta => "sta",
            TrainMethod::Joint => "joint",
        }
    }
}

/// One metrics line per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: u64,
    pub task_ids: Vec<u64>,
    /// Per task: support loss before each inner step and after the last.
    pub support_losses: Vec<Vec<f64>>,
    pub query_losses: Vec<f64>,
    pub grad_norm: f64,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapters: AdapterSet,
    pub records: Vec<TrainRecord>,
    pub examples_consumed: u64,
}

/// Task slots and episodes used by the given iteration of a run with `config`.
pub fn iteration_batch(
    source: &dyn EpisodeSource,
    config: &MetaConfig,
    iteration: u64,
) -> Result<Vec<(usize, Episode)>> {
    let c = config;
    let slots = sample_task_batch(source.task_count(), c.tasks_per_iteration, c.seed, iteration)?;
    let index = training_episode_index(c.seed, iteration);
    slots
        .into_iter()
        .map(|s| Ok((s, source.episode(s, c.support_size, c.query_size, index)?)))
        .collect()
}

/// Worker count from `MLORA_THREADS`, default 1.
pub fn worker_threads() -> usize {
    std::env::var("MLORA_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

struct TaskResult {
    support_losses: Vec<f64>,
    query_loss: f64,
    grads: AdapterGrads,
}

/// Stateful training loop; [`Trainer::step`] runs one iteration.
pub struct Trainer<'a> {
    model: &'a Model,
    source: &'a dyn EpisodeSource,
    config: MetaConfig,
    method: TrainMethod,
    shared: AdapterSet,
    state: AdamWState,
    iteration: u64,
    records: Vec<TrainRecord>,
    examples_consumed: u64,
    threads: usize,
    wall_clock: bool,
    last_gradient: Option<AdapterGrads>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a Model,
        source: &'a dyn EpisodeSource,
        init: AdapterSet,
        config: MetaConfig,
        method: TrainMethod,
    ) -> Result<Self> {
        config.validate(source.task_count())?;
        init.check_binding(model)?;
        let state = adam_state_for(&init, config.adamw);
        Ok(Self {
            model,
            source,
            config,
            method,
            shared: init,
            state,
            iteration: 0,
            records: Vec::new(),
            examples_consumed: 0,
            threads: worker_threads(),
            wall_clock: false,
            last_gradient: None,
        })
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    /// Record real per-iteration timings; off by default so metrics stay byte-stable.
    pub fn with_wall_clock(mut self, on: bool) -> Self {
        self.wall_clock = on;
        self
    }

    pub fn shared(&self) -> &AdapterSet {
        &self.shared
    }

    pub fn optimizer(&self) -> &AdamWState {
        &self.state
    }

    pub fn records(&self) -> &[TrainRecord] {
        &self.records
    }

    pub fn examples_consumed(&self) -> u64 {
        self.examples_consumed
    }

    /// The averaged gradient fed to the optimizer in the latest step.
    pub fn last_gradient(&self) -> Option<&AdapterGrads> {
        self.last_gradient.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// The task slots and episodes the next iteration will use.
    pub fn peek_batch(&self) -> Result<Vec<(usize, Episode)>> {
        self.batch_for(self.iteration)
    }

    fn batch_for(&self, iteration: u64) -> Result<Vec<(usize, Episode)>> {
        iteration_batch(self.source, &self.config, iteration)
    }

    pub fn step(&mut self) -> Result<&TrainRecord> {
        let started = Instant::now();
        let it = self.iteration;
        let batch = self.batch_for(it)?;
        let task_ids: Vec<u64> = batch.iter().map(|(s, _)| self.source.task_id(*s)).collect();
        let drawn: u64 = batch.iter().map(|(_, e)| e.len() as u64).sum();

        let (support_losses, query_losses, grads) = match self.method {
            TrainMethod::Joint => {
                let pooled: Vec<Example> = batch
                    .iter()
                    .flat_map(|(_, e)| e.support.iter().chain(&e.query).cloned())
                    .collect();
                let (l, g) = loss_and_grad(self.model, &self.shared, &pooled, self.source.loss())
                    .map_err(|e| e.in_context(it, None))?;
                (Vec::new(), vec![l], vec![g])
            }
            TrainMethod::Meta | TrainMethod::Sta => {
                let results = self.per_task(&batch, &task_ids, it)?;
                let mut sl = Vec::with_capacity(results.len());
                let mut ql = Vec::with_capacity(results.len());
                let mut gs = Vec::with_capacity(results.len());
                for r in results {
                    sl.push(r.support_losses);
                    ql.push(r.query_loss);
                    gs.push(r.grads);
                }
                (sl, ql, gs)
            }
        };
        if let Some(i) = query_losses.iter().position(|l| !l.is_finite()) {
            return Err(MetaError::Diverged {
                iteration: it,
                task: task_ids.get(i).copied(),
                detail: format!("query loss is {}", query_losses[i]),
            });
        }
        let applied = meta_update(&mut self.shared, &grads, &mut self.state, self.config.outer_lr)?;
        if !self.shared.params().iter().all(|p| p.is_finite()) {
            return Err(MetaError::Diverged {
                iteration: it,
                task: None,
                detail: "shared adapter became non-finite".into(),
            });
        }
        let grad_norm = applied.norm();
        self.last_gradient = Some(applied);
        self.examples_consumed += drawn;
        self.iteration += 1;
        let elapsed_ms = if self.wall_clock {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        self.records.push(TrainRecord {
            iteration: it,
            task_ids,
            support_losses,
            query_losses,
            grad_norm,
            elapsed_ms,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    fn per_task(&self, batch: &[(usize, Episode)], task_ids: &[u64], it: u64) -> Result<Vec<TaskResult>> {
        let work = |i: usize| -> Result<TaskResult> {
            self.one_task(&batch[i].1).map_err(|e| e.in_context(it, Some(task_ids[i])))
        };
        let threads = self.threads.min(batch.len());
        if threads <= 1 {
            return (0..batch.len()).map(work).collect();
        }
        let mut slots: Vec<Option<Result<TaskResult>>> = (0..batch.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let chunk = batch.len().div_ceil(threads);
            for (c, out) in slots.chunks_mut(chunk).enumerate() {
                let work = &work;
                scope.spawn(move || {
                    for (j, slot) in out.iter_mut().enumerate() {
                        *slot = Some(work(c * chunk + j));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every slot filled")).collect()
    }

    fn one_task(&self, episode: &Episode) -> Result<TaskResult> {
        let c = &self.config;
        let loss = self.source.loss();
        match self.method {
            TrainMethod::Meta => {
                let (adapted, support_losses) =
                    inner_adapt(self.model, &self.shared, &episode.support, loss, c.inner_lr, c.inner_steps)?;
                let (query_loss, grads) = query_gradient(self.model, &adapted, &episode.query, loss)?;
                Ok(TaskResult {
                    support_losses,
                    query_loss,
                    grads,
                })
            }
            TrainMethod::Sta => {
                let support_losses = vec![support_loss(self.model, &self.shared, &episode.support, loss)?];
                let (query_loss, grads) = if c.sta_include_support {
                    let both: Vec<Example> = episode.support.iter().chain(&episode.query).cloned().collect();
                    loss_and_grad(self.model, &self.shared, &both, loss)?
                } else {
                    query_gradient(self.model, &self.shared, &episode.query, loss)?
                };
                Ok(TaskResult {
                    support_losses,
                    query_loss,
                    grads,
                })
            }
            TrainMethod::Joint => unreachable!("joint steps are pooled"),
        }
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            adapters: self.shared,
            records: self.records,
            examples_consumed: self.examples_consumed,
        }
    }
}

pub fn run_training(
    model: &Model,
    source: &dyn EpisodeSource,
    init: AdapterSet,
    config: &MetaConfig,
    method: TrainMethod,
) -> Result<TrainOutcome> {
    Trainer::new(model, source, init, config.clone(), method)?.run()
}

pub fn run_meta_training(
    model: &Model,
    source: &dyn EpisodeSource,
    init: AdapterSet,
    config: &MetaConfig,
) -> Result<TrainOutcome> {
    run_training(model, source, init, config, TrainMethod::Meta)
}

pub fn run_sta_training(
    model: &Model,
    source: &dyn EpisodeSource,
    init: AdapterSet,
    config: &MetaConfig,
) -> Result<TrainOutcome> {
    run_training(model, source, init, config, TrainMethod::Sta)
}

pub fn run_joint_baseline(
    model: &Model,
    source: &dyn EpisodeSource,
    init: AdapterSet,
    config: &MetaConfig,
) -> Result<TrainOutcome> {
    run_training(model, source, init, config, TrainMethod::Joint)
}
