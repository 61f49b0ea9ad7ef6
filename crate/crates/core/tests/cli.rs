use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metalora::harness::{prepare, random_init_adapters, Preset, RunConfig};
use metalora::lora::AdapterSet;
use metalora::tensor::PRIMITIVES;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metalora"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a sinusoid config trimmed to `iterations` and returns its path.
fn small_config(dir: &Path, iterations: u64) -> PathBuf {
    let mut cfg = RunConfig::preset(Preset::Sinusoid).normalized();
    cfg.meta.iterations = iterations;
    cfg.eval.held_out_tasks = 5;
    cfg.eval.seeds = vec![0, 1];
    cfg.output_dir = dir.join("run");
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn train_is_byte_identical_across_invocations() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 40);
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = run(&["--config", p(&cfg), "--out", p(&out), "-q", "train"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        files.push((
            fs::read(out.join("adapter.mllw")).unwrap(),
            fs::read(out.join("metrics.jsonl")).unwrap(),
        ));
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn preset_train_writes_one_metric_line_per_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = run(&["--preset", "sinusoid", "--out", p(&out), "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("32000 examples"));
    let text = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1000);
    for (i, line) in lines.iter().enumerate().step_by(97) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(
            keys,
            ["elapsed_ms", "grad_norm", "iteration", "query_losses", "support_losses", "task_ids"]
        );
        assert_eq!(v["iteration"], i as u64);
        assert_eq!(v["support_losses"][0].as_array().unwrap().len(), 4);
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "completed");
    assert_eq!(summary["examples_consumed"], 32000);
    assert_eq!(summary["expected_examples"], 32000);
}

#[test]
fn zero_iterations_saves_the_fresh_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = small_config(tmp.path(), 0);
    let o = run(&["--config", p(&cfg_path), "--seed", "7", "-q", "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let saved = AdapterSet::load(&tmp.path().join("run/adapter.mllw")).unwrap();
    let mut cfg = RunConfig::load(&cfg_path).unwrap();
    cfg.meta.seed = 7;
    let fresh = random_init_adapters(&prepare(&cfg).unwrap(), 7).unwrap();
    assert!(saved.bit_identical(&fresh));
    let metrics = fs::read_to_string(tmp.path().join("run/metrics.jsonl")).unwrap();
    assert!(metrics.is_empty());
}

#[test]
fn invalid_config_exits_2_and_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::preset(Preset::Sinusoid).normalized();
    cfg.meta.tasks_per_iteration = 50;
    let path = tmp.path().join("bad.json");
    fs::write(&path, cfg.to_json()).unwrap();
    let o = run(&["--config", p(&path), "--out", p(&tmp.path().join("x")), "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("meta.tasks_per_iteration"));

    let path = tmp.path().join("typo.json");
    fs::write(&path, r#"{"suite":{"kind":"sinusoid","tasks":10,"seed":0},"itterations":5}"#).unwrap();
    let o = run(&["--config", p(&path), "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("itterations"));

    let o = run(&["train"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_lists_each_primitive_once() {
    let o = run(&["gradcheck"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for prim in PRIMITIVES.iter().copied().chain(["loss:mse", "loss:cross_entropy"]) {
        let hits = text
            .lines()
            .filter(|l| l.split_whitespace().nth(1) == Some(prim))
            .collect::<Vec<_>>();
        assert_eq!(hits.len(), 1, "{prim}\n{text}");
        assert!(hits[0].starts_with("PASS"));
    }
}

#[test]
fn evaluate_and_compare_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 20);
    let o = run(&["--config", p(&cfg), "-q", "train"]);
    assert!(o.status.success());
    let adapter = tmp.path().join("run/adapter.mllw");
    let eval_out = tmp.path().join("eval");
    let o = run(&["--config", p(&cfg), "--out", p(&eval_out), "evaluate", "--adapter", p(&adapter)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(eval_out.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"], serde_json::json!([0, 1]));
    assert_eq!(report["per_seed"][0]["score"]["per_task"].as_array().unwrap().len(), 5);

    let cmp_out = tmp.path().join("cmp");
    let o = run(&["--config", p(&cfg), "--out", p(&cmp_out), "-q", "compare", "--methods", "meta,sta,random-init"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(cmp_out.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,seed_count,mean_query_mse,sd_query_mse,examples_consumed");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("meta,2,"));
    assert!(lines[1].ends_with(",640"));
    assert!(lines[3].starts_with("random-init,2,"));
}

#[test]
fn exported_episodes_replay_to_the_same_adapter() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = small_config(tmp.path(), 30);
    let episodes = tmp.path().join("episodes.jsonl");
    let o = run(&["--config", p(&cfg_path), "-q", "export-suite", "--output", p(&episodes)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&episodes).unwrap().lines().count(), 30 * 2 * 16);

    let generated = tmp.path().join("generated");
    assert!(run(&["--config", p(&cfg_path), "--out", p(&generated), "-q", "train"]).status.success());

    let mut cfg = RunConfig::load(&cfg_path).unwrap();
    cfg.replay = Some(episodes);
    let replay_cfg = tmp.path().join("replay.json");
    fs::write(&replay_cfg, cfg.to_json()).unwrap();
    let replayed = tmp.path().join("replayed");
    let o = run(&["--config", p(&replay_cfg), "--out", p(&replayed), "-q", "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["adapter.mllw", "metrics.jsonl"] {
        assert_eq!(fs::read(generated.join(f)).unwrap(), fs::read(replayed.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn divergence_exits_3_and_keeps_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::preset(Preset::Sinusoid).normalized();
    cfg.meta.inner_lr = 1e200;
    cfg.meta.iterations = 5;
    cfg.output_dir = tmp.path().join("run");
    let path = tmp.path().join("c.json");
    fs::write(&path, cfg.to_json()).unwrap();
    let o = run(&["--config", p(&path), "train"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("run/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "diverged");
    assert!(summary["error"].as_str().unwrap().contains("iteration 0"));
    assert!(!tmp.path().join("run/adapter.mllw").exists());
}

#[test]
fn shipped_configs_match_the_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (file, preset) in [
        ("sinusoid.json", Preset::Sinusoid),
        ("low_rank.json", Preset::LowRank),
        ("sequence.json", Preset::Sequence),
    ] {
        let mut loaded = RunConfig::load(&root.join(file)).unwrap();
        loaded.output_dir = "runs/latest".into();
        assert_eq!(loaded, RunConfig::preset(preset).normalized(), "{file}");
    }
}
