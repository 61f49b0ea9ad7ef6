//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metalora::experiment::ModelSpec;
use metalora::gradcheck;
use metalora::harness::{compare, CompareOptions, CompareReport, MethodTag, Preset, RunConfig};
use metalora::lora::{init_adapters, merge_adapter, AdapterSet};
use metalora::meta::{inner_adapt, run_meta_training, run_sta_training, MetaConfig, TrainMethod, Trainer};
use metalora::nn::{Input, Target};
use metalora::tasks::{make_sequence_suite, make_shared_lowrank_suite, make_sinusoid_suite, EpisodeSource, Example};
use metalora::tensor::Tensor;

const MERGE_TOL: f64 = 1e-10;
const CONTRACT_TOL: f64 = 1e-10;
/// Relative reduction of meta over random-init on the sinusoid suite,
/// frozen from results/pilot_sinusoid.csv (pilot measured 0.401).
const SINUSOID_MIN_REDUCTION: f64 = 0.30;

type Outcome = Result<String, String>;
type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let report = gradcheck::run_gradcheck(0);
    let secs = started.elapsed().as_secs_f64();
    let worst = report.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let min_points = report.results.iter().map(|r| r.points).min().unwrap_or(0);
    check(
        report.all_passed() && min_points >= 20 && secs < 60.0,
        format!(
            "{} cases, {} failed, worst rel err {worst:.2e}, {min_points} points each, {secs:.2}s",
            report.results.len(),
            report.failures().len()
        ),
    )
}

// Plain-matrix oracle for the linear model y = (W0 + s B A) x under mean
// squared error over every output coordinate.
struct Mat {
    r: usize,
    c: usize,
    v: Vec<f64>,
}

impl Mat {
    fn from(t: &Tensor) -> Mat {
        let s = t.shape();
        Mat {
            r: s[0],
            c: s[1],
            v: t.data().to_vec(),
        }
    }
    fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.c + j]
    }
}

fn oracle_grads(w0: &Mat, a: &Mat, b: &Mat, s: f64, examples: &[Example]) -> (Vec<f64>, Vec<f64>) {
    let (d_out, d_in, r) = (w0.r, w0.c, a.r);
    let mut w = vec![0.0; d_out * d_in];
    for i in 0..d_out {
        for j in 0..d_in {
            let mut ba = 0.0;
            for k in 0..r {
                ba += b.at(i, k) * a.at(k, j);
            }
            w[i * d_in + j] = w0.at(i, j) + s * ba;
        }
    }
    let n = examples.len() as f64;
    // dL/dW = sum over examples of g x^T with g = 2 (y - t) / (n d_out)
    let mut gw = vec![0.0; d_out * d_in];
    for ex in examples {
        let (Input::Features(x), Target::Values(t)) = (&ex.input, &ex.target) else {
            panic!("linear oracle needs feature inputs");
        };
        for i in 0..d_out {
            let y: f64 = (0..d_in).map(|j| w[i * d_in + j] * x[j]).sum();
            let g = 2.0 * (y - t[i]) / (n * d_out as f64);
            for j in 0..d_in {
                gw[i * d_in + j] += g * x[j];
            }
        }
    }
    // dA = s B^T dW, dB = s dW A^T
    let mut ga = vec![0.0; r * d_in];
    for k in 0..r {
        for j in 0..d_in {
            ga[k * d_in + j] = s * (0..d_out).map(|i| b.at(i, k) * gw[i * d_in + j]).sum::<f64>();
        }
    }
    let mut gb = vec![0.0; d_out * r];
    for i in 0..d_out {
        for k in 0..r {
            gb[i * r + k] = s * (0..d_in).map(|j| gw[i * d_in + j] * a.at(k, j)).sum::<f64>();
        }
    }
    (ga, gb)
}

fn first_order_contract() -> Outcome {
    let mut worst = 0.0f64;
    for case in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + case);
        let dim = rng.gen_range(3..=6);
        let true_rank = rng.gen_range(1..=2);
        let tasks = rng.gen_range(3..=6);
        let suite = make_shared_lowrank_suite(tasks, dim, true_rank, 0.0, case).map_err(|e| e.to_string())?;
        let model = ModelSpec::Linear { seed: case }.build(&suite).map_err(|e| e.to_string())?;
        let rank = rng.gen_range(1..=dim.min(3));
        let scale = rng.gen_range(0.5..4.0);
        let mut shared =
            init_adapters(&model, &["lin".to_string()], rank, scale, case).map_err(|e| e.to_string())?;
        for v in shared.get_mut("lin").unwrap().b.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let config = MetaConfig {
            inner_lr: rng.gen_range(0.01..0.1),
            inner_steps: rng.gen_range(0..=3),
            tasks_per_iteration: rng.gen_range(1..=tasks.min(3)),
            support_size: rng.gen_range(2..=5),
            query_size: rng.gen_range(2..=5),
            iterations: 1,
            seed: case,
            ..MetaConfig::default()
        };

        let w0 = Mat::from(&model.find_linear("lin").unwrap().weight);
        let start = shared.get("lin").unwrap().clone();
        let mut trainer = Trainer::new(&model, &suite, shared, config.clone(), TrainMethod::Meta)
            .map_err(|e| e.to_string())?
            .with_threads(1);
        let batch = trainer.peek_batch().map_err(|e| e.to_string())?;
        trainer.step().map_err(|e| e.to_string())?;
        let applied = trainer.last_gradient().unwrap().flat();

        let mut sum_a = vec![0.0; rank * dim];
        let mut sum_b = vec![0.0; dim * rank];
        for (_, ep) in &batch {
            let mut a = Mat::from(&start.a);
            let mut b = Mat::from(&start.b);
            for _ in 0..config.inner_steps {
                let (ga, gb) = oracle_grads(&w0, &a, &b, scale, &ep.support);
                a.v.iter_mut().zip(&ga).for_each(|(p, g)| *p -= config.inner_lr * g);
                b.v.iter_mut().zip(&gb).for_each(|(p, g)| *p -= config.inner_lr * g);
            }
            let (ga, gb) = oracle_grads(&w0, &a, &b, scale, &ep.query);
            sum_a.iter_mut().zip(&ga).for_each(|(s, g)| *s += g);
            sum_b.iter_mut().zip(&gb).for_each(|(s, g)| *s += g);
        }
        let n = batch.len() as f64;
        let expected: Vec<f64> = sum_a.iter().chain(&sum_b).map(|v| v / n).collect();
        if expected.len() != applied.len() {
            return Err(format!("case {case}: gradient length {} vs {}", applied.len(), expected.len()));
        }
        let err = expected
            .iter()
            .zip(&applied)
            .map(|(e, a)| (e - a).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    check(worst <= CONTRACT_TOL, format!("10 configurations, max abs diff {worst:.2e}"))
}

fn merge_equivalence() -> Outcome {
    let suite = make_sequence_suite(2, 8, 6, 0).map_err(|e| e.to_string())?;
    let model = ModelSpec::default_for(&suite.spec).build(&suite).map_err(|e| e.to_string())?;
    let targets: Vec<String> = ["attn.q", "attn.k", "attn.v", "attn.o"].map(String::from).to_vec();
    let mut adapters = init_adapters(&model, &targets, 4, 2.0, 5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for t in &targets {
        for v in adapters.get_mut(t).unwrap().b.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let merged = merge_adapter(&model, &adapters).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let tokens: Vec<usize> = (0..6).map(|_| rng.gen_range(0..8)).collect();
        let x = model.encode(&Input::Tokens(tokens)).map_err(|e| e.to_string())?;
        let live = model.forward(&x, Some(&adapters)).map_err(|e| e.to_string())?;
        let folded = merged.forward(&x, None).map_err(|e| e.to_string())?;
        for (a, b) in live.data().iter().zip(folded.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= MERGE_TOL, format!("50 inputs, q/k/v/o adapted, max abs diff {worst:.2e}"))
}

fn structural_equivalences() -> Outcome {
    let suite = make_sinusoid_suite(10, 0).map_err(|e| e.to_string())?;
    let spec = ModelSpec::default_for(&suite.spec);
    let model = spec.build(&suite).map_err(|e| e.to_string())?;
    let init = init_adapters(&model, &spec.default_targets(), 1, 2.0, 3).map_err(|e| e.to_string())?;
    let base = MetaConfig {
        iterations: 25,
        ..MetaConfig::default()
    };

    let k0 = MetaConfig {
        inner_steps: 0,
        ..base.clone()
    };
    let meta = run_meta_training(&model, &suite, init.clone(), &k0).map_err(|e| e.to_string())?;
    let sta = run_sta_training(&model, &suite, init.clone(), &k0).map_err(|e| e.to_string())?;
    let k0_same = meta.adapters.bit_identical(&sta.adapters) && meta.records == sta.records;

    let frozen = MetaConfig {
        outer_lr: 0.0,
        ..base.clone()
    };
    let beta0 = run_meta_training(&model, &suite, init.clone(), &frozen).map_err(|e| e.to_string())?;
    let none = MetaConfig {
        iterations: 0,
        ..base.clone()
    };
    let zero_iters = run_meta_training(&model, &suite, init.clone(), &none).map_err(|e| e.to_string())?;
    let unchanged = beta0.adapters.bit_identical(&init) && zero_iters.adapters.bit_identical(&init);

    let mut trained = run_meta_training(&model, &suite, init.clone(), &base)
        .map_err(|e| e.to_string())?
        .adapters;
    // make sure the adapted copy starts from a non-trivial B
    trained.get_mut("head").unwrap().b.data_mut()[0] += 0.25;
    let before = trained.to_bytes().map_err(|e| e.to_string())?;
    let ep = suite.episode(0, 8, 8, 1).map_err(|e| e.to_string())?;
    let (local, _) = inner_adapt(&model, &trained, &ep.support, suite.loss(), 0.05, 5).map_err(|e| e.to_string())?;
    let after = trained.to_bytes().map_err(|e| e.to_string())?;
    let isolated = before == after && !local.bit_identical(&trained);

    check(
        k0_same && unchanged && isolated,
        format!("k=0 matches no-adaptation: {k0_same}; zero step size / zero iterations unchanged: {unchanged}; inner loop leaves shared bytes intact: {isolated}"),
    )
}

fn run_compare(preset: Preset, methods: &[&str], out: &Path) -> Result<CompareReport, String> {
    let base = RunConfig::preset(preset).normalized();
    let opts = CompareOptions {
        methods: methods.iter().map(|m| MethodTag::parse(m).unwrap()).collect(),
        ..CompareOptions::default()
    };
    compare(&base, &opts, out, |_| {}).map_err(|e| e.to_string())
}

fn row<'a>(report: &'a CompareReport, method: &str) -> &'a metalora::harness::EvalReport {
    &report.rows.iter().find(|r| r.report.method == method).unwrap().report
}

fn ablation_direction(tmp: &Path) -> Outcome {
    let started = Instant::now();
    let report = run_compare(Preset::LowRank, &["meta", "sta"], &tmp.join("low_rank"))?;
    let secs = started.elapsed().as_secs_f64();
    let meta = row(&report, "meta");
    let sta = row(&report, "sta");
    let pairs: Vec<(f64, f64)> = meta
        .per_seed
        .iter()
        .zip(&sta.per_seed)
        .map(|(m, s)| (m.score.mean, s.score.mean))
        .collect();
    let strict = pairs.iter().filter(|(m, s)| m < s).count();
    let runs = (meta.per_seed.len() + sta.per_seed.len()) as f64;
    check(
        meta.mean_query_mse <= sta.mean_query_mse && strict >= 2 && pairs.len() == 3 && secs / runs < 300.0,
        format!(
            "meta {:.5} vs no-adaptation {:.5}; strictly better on {strict}/3 seeds; {:.1}s per run",
            meta.mean_query_mse,
            sta.mean_query_mse,
            secs / runs
        ),
    )
}

fn data_efficiency(tmp: &Path) -> Outcome {
    let report = run_compare(Preset::Sinusoid, &["meta", "joint", "random-init"], &tmp.join("sinusoid"))?;
    let meta = row(&report, "meta");
    let joint = row(&report, "joint");
    let random = row(&report, "random-init");
    let reduction = 1.0 - meta.mean_query_mse / random.mean_query_mse;
    let held_out = meta.per_seed.iter().all(|s| s.score.per_task.len() == 100);
    check(
        report.budget_parity
            && held_out
            && meta.seeds.len() == 3
            && meta.mean_query_mse < joint.mean_query_mse
            && meta.mean_query_mse < random.mean_query_mse
            && reduction >= SINUSOID_MIN_REDUCTION,
        format!(
            "meta {:.4}, joint {:.4}, random-init {:.4}; reduction {:.1}% (bar {:.0}%); budgets {} / {}",
            meta.mean_query_mse,
            joint.mean_query_mse,
            random.mean_query_mse,
            100.0 * reduction,
            100.0 * SINUSOID_MIN_REDUCTION,
            meta.examples_consumed,
            joint.examples_consumed
        ),
    )
}

fn budget_ledger() -> Outcome {
    let suite = make_sinusoid_suite(10, 0).map_err(|e| e.to_string())?;
    let spec = ModelSpec::default_for(&suite.spec);
    let model = spec.build(&suite).map_err(|e| e.to_string())?;
    let init: AdapterSet = init_adapters(&model, &spec.default_targets(), 1, 2.0, 0).map_err(|e| e.to_string())?;
    let config = MetaConfig::default();
    let expected = config.iterations * (config.tasks_per_iteration * (config.support_size + config.query_size)) as u64;
    let mut consumed = Vec::new();
    for method in [TrainMethod::Meta, TrainMethod::Sta, TrainMethod::Joint] {
        let out = metalora::meta::run_training(&model, &suite, init.clone(), &config, method)
            .map_err(|e| e.to_string())?;
        consumed.push(out.examples_consumed);
    }
    check(
        expected == 32_000 && consumed.iter().all(|&c| c == expected),
        format!("expected {expected}, meta/sta/joint consumed {consumed:?}"),
    )
}

fn determinism(tmp: &Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_metalora");
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.join("det").join(run);
        let status = Command::new(bin)
            .args(["--preset", "sinusoid", "--quiet", "--out"])
            .arg(&dir)
            .arg("train")
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("train exited with {status}"));
        }
        let read = |f: &str| std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"));
        outputs.push((read("adapter.mllw")?, read("metrics.jsonl")?));
    }
    let same_adapter = outputs[0].0 == outputs[1].0;
    let same_metrics = outputs[0].1 == outputs[1].1;
    check(
        same_adapter && same_metrics,
        format!(
            "adapter identical: {same_adapter} ({} bytes); metrics identical: {same_metrics} ({} bytes)",
            outputs[0].0.len(),
            outputs[0].1.len()
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Criterion)> = vec![
        ("C1 gradient correctness", Box::new(gradient_correctness)),
        ("C2 first-order contract", Box::new(first_order_contract)),
        ("C3 merge equivalence", Box::new(merge_equivalence)),
        ("C4 structural equivalences", Box::new(structural_equivalences)),
        ("C5 ablation direction", Box::new(|| ablation_direction(tmp.path()))),
        ("C6 data efficiency", Box::new(|| data_efficiency(tmp.path()))),
        ("C7 budget ledger", Box::new(budget_ledger)),
        ("C8 determinism", Box::new(|| determinism(tmp.path()))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let started = Instant::now();
        let outcome = run();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
