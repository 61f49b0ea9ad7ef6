//! Run configuration, experiment commands and their on-disk artifacts.

mod commands;
mod report;

pub use commands::{
    compare, evaluate_adapter, export_suite, prepare, random_init_adapters, train_to_dir, CompareOptions, MethodTag,
    Prepared, TrainSummary,
};
pub use report::{CompareReport, CompareRow, EvalReport, CSV_HEADER};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::{AdapterSpec, ModelSpec};
use crate::lora::LoraError;
use crate::meta::{EvalConfig, MetaConfig, MetaError, TrainMethod};
use crate::nn::NnError;
use crate::tasks::{SuiteSpec, TaskError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("refusing to compare: {0}")]
    Refused(String),
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl HarnessError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Meta(MetaError::Config(_)) => 2,
            HarnessError::Meta(MetaError::Diverged { .. }) => 3,
            HarnessError::GradcheckFailed(_) => 4,
            HarnessError::Refused(_) => 5,
            _ => 1,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

/// Everything a run needs; reproducible from this document alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_method")]
    pub method: TrainMethod,
    #[serde(default)]
    pub meta: MetaConfig,
    pub suite: SuiteSpec,
    /// Defaults to the suite family's standard network.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub adapter: Option<AdapterSpec>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Store real timings in `elapsed_ms`; otherwise it is 0 and metrics are byte-stable.
    #[serde(default)]
    pub record_wall_clock: bool,
    /// Train on episodes previously written by `export-suite` instead of generating them.
    #[serde(default)]
    pub replay: Option<PathBuf>,
}

fn default_method() -> TrainMethod {
    TrainMethod::Meta
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Sinusoid,
    LowRank,
    Sequence,
}

impl RunConfig {
    pub fn preset(p: Preset) -> RunConfig {
        let suite = match p {
            Preset::Sinusoid => SuiteSpec::Sinusoid { tasks: 10, seed: 0 },
            Preset::LowRank => SuiteSpec::SharedLowRank {
                tasks: 10,
                dim: 8,
                true_rank: 2,
                noise: 0.0,
                seed: 0,
            },
            Preset::Sequence => SuiteSpec::Sequence {
                tasks: 8,
                vocab: 8,
                seq_len: 6,
                seed: 0,
            },
        };
        RunConfig {
            method: TrainMethod::Meta,
            meta: MetaConfig::default(),
            model: Some(ModelSpec::default_for(&suite)),
            adapter: Some(AdapterSpec::default_for(&suite)),
            suite,
            output_dir: default_output_dir(),
            eval: EvalConfig::default(),
            record_wall_clock: false,
            replay: None,
        }
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg.normalized())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fills in the model and adapter defaults for the chosen suite.
    pub fn normalized(mut self) -> RunConfig {
        if self.model.is_none() {
            self.model = Some(ModelSpec::default_for(&self.suite));
        }
        if self.adapter.is_none() {
            self.adapter = Some(AdapterSpec::default_for(&self.suite));
        }
        let model = self.model_spec();
        if let Some(a) = &mut self.adapter {
            if a.targets.is_none() {
                a.targets = Some(model.default_targets());
            }
        }
        self
    }

    pub fn model_spec(&self) -> ModelSpec {
        self.model.clone().unwrap_or_else(|| ModelSpec::default_for(&self.suite))
    }

    pub fn adapter_spec(&self) -> AdapterSpec {
        self.adapter.clone().unwrap_or_else(|| AdapterSpec::default_for(&self.suite))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Collects every field-level problem into one diagnostic.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.suite.validate() {
            problems.push(format!("suite: {e}"));
        }
        if let Err(MetaError::Config(m)) = self.meta.validate(self.suite.task_count()) {
            problems.extend(m.split("; ").map(|p| format!("meta.{p}")));
        }
        let ad = self.adapter_spec();
        if ad.rank == 0 {
            problems.push("adapter.rank must be >= 1".into());
        }
        if !(ad.scale.is_finite() && ad.scale >= 0.0) {
            problems.push(format!("adapter.scale must be finite and >= 0, got {}", ad.scale));
        }
        if matches!(&ad.targets, Some(t) if t.is_empty()) {
            problems.push("adapter.targets must name at least one layer".into());
        }
        if self.eval.held_out_tasks == 0 {
            problems.push("eval.held_out_tasks must be >= 1".into());
        }
        if self.eval.seeds.is_empty() {
            problems.push("eval.seeds must not be empty".into());
        }
        if self.eval.query_size == 0 {
            problems.push("eval.query_size must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in [Preset::Sinusoid, Preset::LowRank, Preset::Sequence] {
            let c = RunConfig::preset(p).normalized();
            c.validate().unwrap();
            assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::from_json(r#"{"suite":{"kind":"sinusoid","tasks":10,"seed":0}}"#).unwrap();
        assert_eq!(c.method, TrainMethod::Meta);
        assert_eq!(c.meta, MetaConfig::default());
        assert_eq!(c.adapter.as_ref().unwrap().rank, 1);
        assert_eq!(
            c.adapter.unwrap().targets.unwrap(),
            vec!["mlp.0".to_string(), "mlp.1".into(), "head".into()]
        );
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_field_name() {
        let e = RunConfig::from_json(r#"{"suite":{"kind":"sinusoid","tasks":10,"seed":0},"meta":{"inner_lr":0.1,"outer_lr":0.1,"inner_steps":1,"tasks_per_iteration":1,"support_size":1,"query_size":1,"iterations":1,"seed":0,"outer_lrr":1}}"#)
            .unwrap_err();
        assert!(e.to_string().contains("outer_lrr"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn validation_lists_each_bad_field() {
        let mut c = RunConfig::preset(Preset::Sinusoid);
        c.meta.tasks_per_iteration = 11;
        c.eval.seeds.clear();
        c.adapter.as_mut().unwrap().rank = 0;
        let msg = c.validate().unwrap_err().to_string();
        for needle in ["meta.tasks_per_iteration", "eval.seeds", "adapter.rank"] {
            assert!(msg.contains(needle), "{msg}");
        }
    }
}
