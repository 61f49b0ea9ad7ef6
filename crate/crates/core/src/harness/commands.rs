use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::report::{CompareReport, CompareRow, EvalReport};
use super::{io_err, HarnessError, Result, RunConfig};
use crate::lora::{init_adapters, AdapterSet};
use crate::meta::{evaluate_held_out, iteration_batch, MetaError, SeedScore, TrainMethod, Trainer};
use crate::nn::Model;
use crate::tasks::{read_episodes_jsonl, write_episodes_jsonl, EpisodeSource, ReplaySuite, Suite, TaskHandle};

pub const ADAPTER_FILE: &str = "adapter.mllw";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// A validated config with its suite, base network and adapter targets built.
pub struct Prepared {
    pub config: RunConfig,
    pub suite: Suite,
    pub model: Model,
    pub targets: Vec<String>,
    replay: Option<ReplaySuite>,
}

impl Prepared {
    pub fn source(&self) -> &dyn EpisodeSource {
        match &self.replay {
            Some(r) => r,
            None => &self.suite,
        }
    }

    pub fn held_out(&self) -> Vec<TaskHandle> {
        self.suite.held_out(self.config.eval.held_out_tasks)
    }
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    let config = config.clone().normalized();
    config.validate()?;
    let suite = Suite::build(config.suite.clone())?;
    let model_spec = config.model_spec();
    let model = model_spec
        .build(&suite)
        .map_err(|e| HarnessError::Config(format!("model: {e}")))?;
    let adapter = config.adapter_spec();
    let targets = adapter.resolved_targets(&model_spec);
    init_adapters(&model, &targets, adapter.rank, adapter.scale, 0)
        .map_err(|e| HarnessError::Config(format!("adapter: {e}")))?;
    let replay = match &config.replay {
        Some(path) => {
            let file = File::open(path).map_err(io_err(path))?;
            let episodes = read_episodes_jsonl(BufReader::new(file))?;
            let ids = (0..suite.tasks.len()).map(|s| suite.task_id(s)).collect();
            Some(ReplaySuite::new(ids, suite.spec.loss(), episodes))
        }
        None => None,
    };
    Ok(Prepared {
        config,
        suite,
        model,
        targets,
        replay,
    })
}

/// Fresh adapters for the run's targets, seeded by `seed`.
pub fn random_init_adapters(p: &Prepared, seed: u64) -> Result<AdapterSet> {
    let a = p.config.adapter_spec();
    Ok(init_adapters(&p.model, &p.targets, a.rank, a.scale, seed)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub status: String,
    pub method: TrainMethod,
    pub iterations_completed: u64,
    pub examples_consumed: u64,
    /// `iterations * tasks_per_iteration * (support_size + query_size)`.
    pub expected_examples: u64,
    /// Mean query loss of the last iteration.
    pub final_query_loss: Option<f64>,
    /// Mean support loss after adaptation in the last iteration.
    pub final_support_loss: Option<f64>,
    pub adapter_file: Option<String>,
    pub error: Option<String>,
    pub config: RunConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Trains per the config, writing the adapter, metrics and summary into `dir`.
///
/// On failure the metrics written so far and a summary describing the error
/// are kept; no adapter file is written.
pub fn train_to_dir(p: &Prepared, dir: &Path) -> Result<(TrainSummary, AdapterSet)> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let cfg = &p.config;
    let init = random_init_adapters(p, cfg.meta.seed)?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    let mut trainer = Trainer::new(&p.model, p.source(), init, cfg.meta.clone(), cfg.method)?
        .with_wall_clock(cfg.record_wall_clock);

    let mut failure: Option<MetaError> = None;
    while !trainer.is_done() {
        match trainer.step() {
            Ok(rec) => {
                serde_json::to_writer(&mut metrics, rec).map_err(|e| io_err(&metrics_path)(e.into()))?;
                metrics.write_all(b"\n").map_err(io_err(&metrics_path))?;
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    metrics.flush().map_err(io_err(&metrics_path))?;

    let last = trainer.records().last();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let final_query_loss = last.and_then(|r| mean(&r.query_losses));
    let final_support_loss = last.and_then(|r| {
        let ends: Vec<f64> = r.support_losses.iter().filter_map(|l| l.last().copied()).collect();
        mean(&ends)
    });
    let mut summary = TrainSummary {
        status: "completed".into(),
        method: cfg.method,
        iterations_completed: trainer.records().len() as u64,
        examples_consumed: trainer.examples_consumed(),
        expected_examples: cfg.meta.iterations * cfg.meta.examples_per_iteration(),
        final_query_loss,
        final_support_loss,
        adapter_file: None,
        error: None,
        config: cfg.clone(),
    };
    if let Some(e) = failure {
        summary.status = if matches!(e, MetaError::Diverged { .. }) {
            "diverged".into()
        } else {
            "failed".into()
        };
        summary.error = Some(e.to_string());
        write_json(&dir.join(SUMMARY_FILE), &summary)?;
        return Err(e.into());
    }
    let outcome = trainer.finish();
    let adapter_path = dir.join(ADAPTER_FILE);
    outcome.adapters.save(&adapter_path)?;
    summary.adapter_file = Some(ADAPTER_FILE.into());
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok((summary, outcome.adapters))
}

/// Held-out score of `adapters` for one evaluation seed.
fn score_seed(p: &Prepared, adapters: &AdapterSet, held: &[TaskHandle], seed: u64) -> Result<SeedScore> {
    adapters.check_binding(&p.model)?;
    let score = evaluate_held_out(
        &p.model,
        adapters,
        held,
        p.suite.spec.loss(),
        &p.config.meta,
        p.config.eval.query_size,
        seed,
    )?;
    Ok(SeedScore { seed, score })
}

/// Evaluates one adapter set under every configured evaluation seed.
pub fn evaluate_adapter(p: &Prepared, adapters: &AdapterSet, method: &str, examples_consumed: u64) -> Result<EvalReport> {
    let held = p.held_out();
    let per_seed = p
        .config
        .eval
        .seeds
        .iter()
        .map(|&s| score_seed(p, adapters, &held, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scores(method, per_seed, examples_consumed))
}

/// Writes the episodes a training run with this config consumes, in order.
pub fn export_suite(p: &Prepared, path: &Path) -> Result<usize> {
    if let Some(parent) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let source = p.source();
    let mut examples = 0;
    for it in 0..p.config.meta.iterations {
        let batch = iteration_batch(source, &p.config.meta, it)?;
        let index = crate::tasks::training_episode_index(p.config.meta.seed, it);
        let listed: Vec<(u64, u64, &crate::tasks::Episode)> =
            batch.iter().map(|(s, e)| (source.task_id(*s), index, e)).collect();
        write_episodes_jsonl(&mut w, &listed)?;
        examples += batch.iter().map(|(_, e)| e.len()).sum::<usize>();
    }
    w.flush().map_err(io_err(path))?;
    Ok(examples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodTag {
    Trained(TrainMethod),
    /// Untrained adapters adapted on each held-out task.
    RandomInit,
}

impl MethodTag {
    pub fn parse(s: &str) -> Option<MethodTag> {
        Some(match s {
            "meta" => MethodTag::Trained(TrainMethod::Meta),
            "sta" => MethodTag::Trained(TrainMethod::Sta),
            "joint" => MethodTag::Trained(TrainMethod::Joint),
            "random-init" => MethodTag::RandomInit,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MethodTag::Trained(m) => m.as_str(),
            MethodTag::RandomInit => "random-init",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompareOptions {
    /// Rows built from the base config.
    pub methods: Vec<MethodTag>,
    /// Additional complete configs, one row each, labelled by their method.
    pub extra: Vec<RunConfig>,
    /// Expand trained rows over the learning-rate grid.
    pub lr_grid: bool,
    pub allow_budget_mismatch: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            methods: vec![
                MethodTag::Trained(TrainMethod::Meta),
                MethodTag::Trained(TrainMethod::Joint),
                MethodTag::RandomInit,
            ],
            extra: Vec::new(),
            lr_grid: false,
            allow_budget_mismatch: false,
        }
    }
}

struct Entry {
    label: String,
    tag: MethodTag,
    config: RunConfig,
}

fn expand(base: &RunConfig, opts: &CompareOptions) -> Vec<Entry> {
    let mut entries = Vec::new();
    for &tag in &opts.methods {
        match tag {
            MethodTag::Trained(m) if opts.lr_grid => {
                for (name, meta) in base.meta.lr_grid() {
                    let config = RunConfig {
                        method: m,
                        meta,
                        ..base.clone()
                    };
                    entries.push(Entry {
                        label: format!("{}@{name}", m.as_str()),
                        tag,
                        config,
                    });
                }
            }
            MethodTag::Trained(m) => entries.push(Entry {
                label: m.as_str().into(),
                tag,
                config: RunConfig {
                    method: m,
                    ..base.clone()
                },
            }),
            MethodTag::RandomInit => entries.push(Entry {
                label: tag.as_str().into(),
                tag,
                config: base.clone(),
            }),
        }
    }
    for c in &opts.extra {
        entries.push(Entry {
            label: c.method.as_str().into(),
            tag: MethodTag::Trained(c.method),
            config: c.clone(),
        });
    }
    // disambiguate repeated labels
    let labels: Vec<String> = entries.iter().map(|e| e.label.clone()).collect();
    for (i, e) in entries.iter_mut().enumerate() {
        if labels.iter().filter(|l| **l == labels[i]).count() > 1 {
            let k = labels[..i].iter().filter(|l| **l == labels[i]).count() + 1;
            e.label = format!("{}#{k}", labels[i]);
        }
    }
    entries
}

fn check_comparable(entries: &[Entry]) -> Result<()> {
    let Some(first) = entries.first() else {
        return Err(HarnessError::Refused("nothing to compare".into()));
    };
    let a = first.config.clone().normalized();
    for e in &entries[1..] {
        let b = e.config.clone().normalized();
        let mut diffs = Vec::new();
        if a.suite != b.suite {
            diffs.push("suite");
        }
        if a.model != b.model {
            diffs.push("model");
        }
        if a.adapter != b.adapter {
            diffs.push("adapter");
        }
        if a.eval != b.eval {
            diffs.push("eval");
        }
        if a.replay != b.replay {
            diffs.push("replay");
        }
        if !diffs.is_empty() {
            return Err(HarnessError::Refused(format!(
                "{} and {} differ in {}; rows must share suite, model, adapter and evaluation settings",
                first.label,
                e.label,
                diffs.join(", ")
            )));
        }
    }
    Ok(())
}

fn check_budgets(rows: &[(String, bool, u64)], allow: bool) -> Result<bool> {
    let trained: Vec<&(String, bool, u64)> = rows.iter().filter(|r| r.1).collect();
    let parity = trained.windows(2).all(|w| w[0].2 == w[1].2);
    if !parity && !allow {
        let ledger: Vec<String> = trained.iter().map(|(l, _, n)| format!("{l}={n}")).collect();
        return Err(HarnessError::Refused(format!(
            "example budgets differ ({}); pass --allow-budget-mismatch to tabulate anyway",
            ledger.join(", ")
        )));
    }
    Ok(parity)
}

/// Trains every row under each evaluation seed, scores it on the held-out
/// tasks and writes `comparison.{csv,txt,json}` plus per-run directories.
pub fn compare(base: &RunConfig, opts: &CompareOptions, out: &Path, mut log: impl FnMut(&str)) -> Result<CompareReport> {
    let entries = expand(base, opts);
    check_comparable(&entries)?;
    let planned: Vec<(String, bool, u64)> = entries
        .iter()
        .map(|e| {
            let trained = matches!(e.tag, MethodTag::Trained(_));
            let budget = if trained {
                e.config.meta.iterations * e.config.meta.examples_per_iteration()
            } else {
                0
            };
            (e.label.clone(), trained, budget)
        })
        .collect();
    check_budgets(&planned, opts.allow_budget_mismatch)?;

    let mut rows = Vec::with_capacity(entries.len());
    let mut actual = Vec::with_capacity(entries.len());
    for e in &entries {
        let mut scores = Vec::new();
        let mut consumed = 0;
        for &seed in &e.config.eval.seeds {
            let mut cfg = e.config.clone();
            cfg.meta.seed = seed;
            let p = prepare(&cfg)?;
            let held = p.held_out();
            let adapters = match e.tag {
                MethodTag::RandomInit => random_init_adapters(&p, seed)?,
                MethodTag::Trained(_) => {
                    let dir: PathBuf = out.join(&e.label).join(format!("seed-{seed}"));
                    let (summary, adapters) = train_to_dir(&p, &dir)?;
                    consumed = summary.examples_consumed;
                    adapters
                }
            };
            let s = score_seed(&p, &adapters, &held, seed)?;
            log(&format!("{} seed {seed}: {:.6}", e.label, s.score.mean));
            scores.push(s);
        }
        let trained = matches!(e.tag, MethodTag::Trained(_));
        actual.push((e.label.clone(), trained, consumed));
        rows.push(CompareRow {
            report: EvalReport::from_scores(e.label.clone(), scores, consumed),
            trained,
        });
    }
    let budget_parity = check_budgets(&actual, opts.allow_budget_mismatch)?;
    let report = CompareReport { rows, budget_parity };
    fs::create_dir_all(out).map_err(io_err(out))?;
    let csv = out.join("comparison.csv");
    fs::write(&csv, report.to_csv()).map_err(io_err(&csv))?;
    let txt = out.join("comparison.txt");
    fs::write(&txt, report.to_table()).map_err(io_err(&txt))?;
    write_json(&out.join("comparison.json"), &report)?;
    Ok(report)
}
