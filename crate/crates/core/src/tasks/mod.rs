//! Synthetic multi-task suites and the episodic sampler.
//!
//! A suite is a pure function of its seed: task parameters are drawn from a
//! stream keyed by `(suite seed, task id)` and each episode from a stream keyed
//! by `(suite seed, task id, episode index)`.

mod generators;
mod replay;

pub use generators::{contains_marker, LowRankBasis, TaskHandle, TaskKind};
pub use replay::{read_episodes_jsonl, write_episodes_jsonl, ExampleRecord, ReplaySuite, Split};

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Input, Loss, Target};
use crate::seed;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("task {task}: could not draw {needed} distinct examples")]
    Capacity { task: u64, needed: usize },
    #[error("{0}")]
    Contract(String),
    #[error("no recorded episode {index} for task {task}")]
    Missing { task: u64, index: u64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TaskError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input: Input,
    pub target: Target,
}

/// One task's disjoint support and query sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<Example>,
    pub query: Vec<Example>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.support.len() + self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when no support input reappears in the query set.
    pub fn is_disjoint(&self) -> bool {
        let support: HashSet<Vec<u64>> = self.support.iter().map(|e| e.input.identity_key()).collect();
        self.query.iter().all(|e| !support.contains(&e.input.identity_key()))
    }
}

/// Suite description as it appears in run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SuiteSpec {
    /// `y = amplitude * sin(x + phase)`.
    Sinusoid { tasks: usize, seed: u64 },
    /// `y = (W0 + B_t A*) x` with a suite-wide `A*` of rank `true_rank`.
    SharedLowRank {
        tasks: usize,
        dim: usize,
        true_rank: usize,
        #[serde(default)]
        noise: f64,
        seed: u64,
    },
    /// Label 1 iff the sequence contains the task's marker bigram.
    Sequence {
        tasks: usize,
        vocab: usize,
        seq_len: usize,
        seed: u64,
    },
}

impl SuiteSpec {
    pub fn task_count(&self) -> usize {
        match self {
            SuiteSpec::Sinusoid { tasks, .. }
            | SuiteSpec::SharedLowRank { tasks, .. }
            | SuiteSpec::Sequence { tasks, .. } => *tasks,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            SuiteSpec::Sinusoid { seed, .. }
            | SuiteSpec::SharedLowRank { seed, .. }
            | SuiteSpec::Sequence { seed, .. } => *seed,
        }
    }

    pub fn loss(&self) -> Loss {
        match self {
            SuiteSpec::Sequence { .. } => Loss::CrossEntropy,
            _ => Loss::Mse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task_count() == 0 {
            return Err(TaskError::Contract("suite needs at least one task".into()));
        }
        match *self {
            SuiteSpec::Sinusoid { .. } => Ok(()),
            SuiteSpec::SharedLowRank {
                dim, true_rank, noise, ..
            } => {
                if dim == 0 || true_rank == 0 || true_rank > dim {
                    return Err(TaskError::Contract(format!(
                        "shared_low_rank needs 1 <= true_rank <= dim, got true_rank={true_rank} dim={dim}"
                    )));
                }
                if !(noise.is_finite() && noise >= 0.0) {
                    return Err(TaskError::Contract(format!("noise must be non-negative, got {noise}")));
                }
                Ok(())
            }
            SuiteSpec::Sequence { vocab, seq_len, .. } => {
                if vocab < 4 || seq_len < 2 {
                    return Err(TaskError::Contract(format!(
                        "sequence suite needs vocab >= 4 and seq_len >= 2, got {vocab} and {seq_len}"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Where the trainer gets its episodes from.
pub trait EpisodeSource: Sync {
    fn task_count(&self) -> usize;
    fn task_id(&self, slot: usize) -> u64;
    fn episode(&self, slot: usize, n_support: usize, n_query: usize, index: u64) -> Result<Episode>;
    fn loss(&self) -> Loss;
}

/// A generated suite: its training tasks plus the ability to mint held-out ones.
#[derive(Debug, Clone)]
pub struct Suite {
    pub spec: SuiteSpec,
    pub tasks: Vec<TaskHandle>,
    basis: Option<Arc<LowRankBasis>>,
}

impl Suite {
    pub fn build(spec: SuiteSpec) -> Result<Suite> {
        spec.validate()?;
        let basis = match spec {
            SuiteSpec::SharedLowRank {
                dim,
                true_rank,
                noise,
                seed,
                ..
            } => Some(Arc::new(LowRankBasis::generate(dim, true_rank, noise, seed))),
            _ => None,
        };
        let mut suite = Suite {
            spec,
            tasks: Vec::new(),
            basis,
        };
        suite.tasks = (0..suite.spec.task_count() as u64).map(|id| suite.make_task(id)).collect();
        Ok(suite)
    }

    /// The task with the given id; ids beyond the training range are held out.
    pub fn make_task(&self, id: u64) -> TaskHandle {
        TaskHandle::generate(&self.spec, self.basis.clone(), id)
    }

    /// `count` tasks that never appear during training.
    pub fn held_out(&self, count: usize) -> Vec<TaskHandle> {
        let start = self.spec.task_count() as u64;
        (start..start + count as u64).map(|id| self.make_task(id)).collect()
    }

    pub fn basis(&self) -> Option<&LowRankBasis> {
        self.basis.as_deref()
    }
}

impl EpisodeSource for Suite {
    fn task_count(&self) -> usize {
        self.tasks.len()
    }

    fn task_id(&self, slot: usize) -> u64 {
        self.tasks[slot].id
    }

    fn episode(&self, slot: usize, n_support: usize, n_query: usize, index: u64) -> Result<Episode> {
        sample_episode(&self.tasks[slot], n_support, n_query, index)
    }

    fn loss(&self) -> Loss {
        self.spec.loss()
    }
}

pub fn make_sinusoid_suite(tasks: usize, seed: u64) -> Result<Suite> {
    Suite::build(SuiteSpec::Sinusoid { tasks, seed })
}

pub fn make_shared_lowrank_suite(tasks: usize, dim: usize, true_rank: usize, noise: f64, seed: u64) -> Result<Suite> {
    Suite::build(SuiteSpec::SharedLowRank {
        tasks,
        dim,
        true_rank,
        noise,
        seed,
    })
}

pub fn make_sequence_suite(tasks: usize, vocab: usize, seq_len: usize, seed: u64) -> Result<Suite> {
    Suite::build(SuiteSpec::Sequence {
        tasks,
        vocab,
        seq_len,
        seed,
    })
}

/// Draws `n_support + n_query` distinct examples; the first `n_support` form
/// the support set. Sequence tasks alternate labels within each split.
pub fn sample_episode(task: &TaskHandle, n_support: usize, n_query: usize, index: u64) -> Result<Episode> {
    if n_support == 0 || n_query == 0 {
        return Err(TaskError::Contract("support and query sizes must be at least 1".into()));
    }
    let needed = n_support + n_query;
    let mut rng = seed::stream(&[seed::TAG_EPISODE, task.suite_seed, task.id, index]);
    let mut seen = HashSet::with_capacity(needed);
    let mut drawn = Vec::with_capacity(needed);
    let budget = 200 * needed + 1000;
    let mut attempts = 0;
    for split_len in [n_support, n_query] {
        for i in 0..split_len {
            let label = (i % 2 == 0) as usize;
            loop {
                attempts += 1;
                if attempts > budget {
                    return Err(TaskError::Capacity { task: task.id, needed });
                }
                let ex = task.draw(&mut rng, label);
                if seen.insert(ex.input.identity_key()) {
                    drawn.push(ex);
                    break;
                }
            }
        }
    }
    let query = drawn.split_off(n_support);
    Ok(Episode { support: drawn, query })
}

/// `n` distinct task slots out of `task_count`, uniformly without replacement.
pub fn sample_task_batch(task_count: usize, n: usize, run_seed: u64, iteration: u64) -> Result<Vec<usize>> {
    if n == 0 || n > task_count {
        return Err(TaskError::Contract(format!(
            "cannot select {n} distinct tasks from {task_count}"
        )));
    }
    let mut rng = seed::stream(&[seed::TAG_BATCH, run_seed, iteration]);
    Ok(index::sample(&mut rng, task_count, n).into_vec())
}

/// Episode index a training run uses for the given iteration.
pub fn training_episode_index(run_seed: u64, iteration: u64) -> u64 {
    seed::mix(&[seed::TAG_EPISODE_INDEX, run_seed, iteration])
}

/// Episode index used when evaluating held-out tasks under `eval_seed`.
pub fn eval_episode_index(eval_seed: u64) -> u64 {
    seed::mix(&[seed::TAG_EVAL, eval_seed])
}

impl Example {
    pub fn new(input: Input, target: Target) -> Self {
        Self { input, target }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episode_sizes_and_disjointness() {
        let suite = make_sinusoid_suite(3, 0).unwrap();
        let ep = sample_episode(&suite.tasks[0], 8, 8, 0).unwrap();
        assert_eq!((ep.support.len(), ep.query.len()), (8, 8));
        assert!(ep.is_disjoint());
        let keys: HashSet<_> = ep.support.iter().chain(&ep.query).map(|e| e.input.identity_key()).collect();
        assert_eq!(keys.len(), 16);
        let tiny = sample_episode(&suite.tasks[1], 1, 1, 3).unwrap();
        assert_ne!(tiny.support[0].input, tiny.query[0].input);
        assert!(sample_episode(&suite.tasks[0], 0, 1, 0).is_err());
    }

    #[test]
    fn episodes_are_deterministic() {
        let suite = make_sequence_suite(4, 6, 5, 2).unwrap();
        let a = sample_episode(&suite.tasks[2], 8, 8, 0).unwrap();
        let b = sample_episode(&suite.tasks[2], 8, 8, 0).unwrap();
        assert_eq!(a, b);
        let c = sample_episode(&suite.tasks[2], 8, 8, 1).unwrap();
        assert_ne!(a, c);
        let rebuilt = make_sequence_suite(4, 6, 5, 2).unwrap();
        assert_eq!(sample_episode(&rebuilt.tasks[2], 8, 8, 0).unwrap(), a);
    }

    #[test]
    fn capacity_error_when_inputs_run_out() {
        // vocab 4, length 2: only 16 distinct sequences exist
        let suite = make_sequence_suite(1, 4, 2, 0).unwrap();
        match sample_episode(&suite.tasks[0], 20, 20, 0) {
            Err(TaskError::Capacity { needed: 40, .. }) => {}
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn task_batch_contract() {
        let full = sample_task_batch(5, 5, 0, 0).unwrap();
        let mut sorted = full.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        for it in 0..50 {
            let b = sample_task_batch(5, 2, 1, it).unwrap();
            assert_eq!(b.len(), 2);
            assert_ne!(b[0], b[1]);
        }
        assert!(sample_task_batch(5, 6, 0, 0).is_err());
        assert!(sample_task_batch(5, 0, 0, 0).is_err());
    }

    #[test]
    fn task_batch_frequencies_match_binomial() {
        let (n_tasks, n, draws) = (5usize, 2usize, 10_000u64);
        let mut counts = vec![0u64; n_tasks];
        for it in 0..draws {
            for s in sample_task_batch(n_tasks, n, 7, it).unwrap() {
                counts[s] += 1;
            }
        }
        let p = n as f64 / n_tasks as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "count {c} vs {mean} +- {}", 3.0 * sd);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(make_sequence_suite(2, 3, 4, 0).is_err());
        assert!(make_sequence_suite(2, 4, 1, 0).is_err());
        assert!(make_shared_lowrank_suite(2, 4, 5, 0.0, 0).is_err());
        assert!(make_sinusoid_suite(0, 0).is_err());
    }

    #[test]
    fn held_out_tasks_are_new() {
        let suite = make_sinusoid_suite(10, 0).unwrap();
        let held = suite.held_out(3);
        assert_eq!(held.iter().map(|t| t.id).collect::<Vec<_>>(), vec![10, 11, 12]);
        assert_eq!(suite.make_task(10), held[0]);
    }
}
