use serde::{Deserialize, Serialize};

use super::{inner_adapt, support_loss, MetaConfig, Result};
use crate::lora::AdapterSet;
use crate::nn::{Loss, Model};
use crate::tasks::{eval_episode_index, sample_episode, Episode, TaskHandle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub held_out_tasks: usize,
    pub seeds: Vec<u64>,
    pub query_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            held_out_tasks: 100,
            seeds: vec![0, 1, 2],
            query_size: 32,
        }
    }
}

/// Post-adaptation query loss on every held-out task for one evaluation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutScore {
    pub task_ids: Vec<u64>,
    pub per_task: Vec<f64>,
    /// Query loss before any adaptation, per task.
    pub zero_shot: Vec<f64>,
    pub mean: f64,
    pub zero_shot_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub score: HeldOutScore,
}

/// Adapts a clone of `start` on the support set and scores the query set.
/// Returns `(post-adaptation loss, loss before adaptation)`.
pub fn adapt_and_score(
    model: &Model,
    start: &AdapterSet,
    episode: &Episode,
    loss: Loss,
    inner_lr: f64,
    steps: usize,
) -> Result<(f64, f64)> {
    let before = support_loss(model, start, &episode.query, loss)?;
    let (adapted, _) = inner_adapt(model, start, &episode.support, loss, inner_lr, steps)?;
    let after = support_loss(model, &adapted, &episode.query, loss)?;
    Ok((after, before))
}

/// Scores `start` on `tasks`, each adapted with the training inner loop on a
/// fresh episode whose index is derived from `eval_seed`.
pub fn evaluate_held_out(
    model: &Model,
    start: &AdapterSet,
    tasks: &[TaskHandle],
    loss: Loss,
    config: &MetaConfig,
    query_size: usize,
    eval_seed: u64,
) -> Result<HeldOutScore> {
    let index = eval_episode_index(eval_seed);
    let mut per_task = Vec::with_capacity(tasks.len());
    let mut zero_shot = Vec::with_capacity(tasks.len());
    for t in tasks {
        let ep = sample_episode(t, config.support_size, query_size, index)?;
        let (after, before) = adapt_and_score(model, start, &ep, loss, config.inner_lr, config.inner_steps)?;
        per_task.push(after);
        zero_shot.push(before);
    }
    let mean = mean_of(&per_task);
    let zero_shot_mean = mean_of(&zero_shot);
    Ok(HeldOutScore {
        task_ids: tasks.iter().map(|t| t.id).collect(),
        per_task,
        zero_shot,
        mean,
        zero_shot_mean,
    })
}

fn mean_of(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
