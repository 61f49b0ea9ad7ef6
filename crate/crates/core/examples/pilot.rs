//! Brute-force sweep over sinusoid base networks and adapter shapes at the
//! default training config. Prints held-out post-adaptation MSE for the
//! meta-trained adapter, the joint baseline and an untrained adapter.
//!
//! cargo run --release --example pilot -- [quick]

use metalora::experiment::{Activation, ModelSpec};
use metalora::lora::init_adapters;
use metalora::meta::{evaluate_held_out, run_training, MetaConfig, TrainMethod};
use metalora::tasks::make_sinusoid_suite;

struct Variant {
    hidden: Vec<usize>,
    gain: f64,
    targets: Vec<&'static str>,
    rank: usize,
    scale: f64,
}

fn lowrank() {
    use metalora::tasks::make_shared_lowrank_suite;
    let suite = make_shared_lowrank_suite(10, 8, 2, 0.0, 0).unwrap();
    let held = suite.held_out(100);
    let model = ModelSpec::Linear { seed: 0 }.build(&suite).unwrap();
    println!("rank,scale,seed,meta,sta,random");
    for (rank, scale) in [(2, 1.0), (2, 2.0), (2, 4.0), (2, 8.0), (2, 16.0), (4, 8.0)] {
        for seed in 0..3u64 {
            let cfg = MetaConfig {
                seed,
                ..MetaConfig::default()
            };
            let init = init_adapters(&model, &["lin".to_string()], rank, scale, seed).unwrap();
            let score = |ad: &metalora::lora::AdapterSet| {
                evaluate_held_out(&model, ad, &held, suite.spec.loss(), &cfg, 32, seed)
                    .map(|s| s.mean)
                    .unwrap_or(f64::NAN)
            };
            let meta = score(&run_training(&model, &suite, init.clone(), &cfg, TrainMethod::Meta).unwrap().adapters);
            let sta = score(&run_training(&model, &suite, init.clone(), &cfg, TrainMethod::Sta).unwrap().adapters);
            println!("{rank},{scale},{seed},{meta:.6},{sta:.6},{:.6}", score(&init));
        }
    }
}

fn main() {
    if std::env::args().any(|a| a == "lowrank") {
        return lowrank();
    }
    let quick = std::env::args().any(|a| a == "quick");
    let suite = make_sinusoid_suite(10, 0).unwrap();
    let held = suite.held_out(100);
    let seeds: &[u64] = if quick { &[0] } else { &[0, 1, 2] };

    let mut variants = Vec::new();
    let grid: Vec<(Vec<&str>, usize)> = vec![
        (vec!["mlp.1", "head"], 1),
        (vec!["mlp.0", "mlp.1", "head"], 1),
        (vec!["mlp.1"], 4),
    ];
    let only: Option<usize> = std::env::args().find_map(|a| a.strip_prefix("only=").and_then(|v| v.parse().ok()));
    for hidden in [vec![32, 32], vec![40, 40]] {
        for gain in [1.0, 2.0] {
            for (targets, rank) in &grid {
                for scale in [1.0, 2.0, 3.0, 4.0, 6.0] {
                    variants.push(Variant {
                        hidden: hidden.clone(),
                        gain,
                        targets: targets.clone(),
                        rank: *rank,
                        scale,
                    });
                }
            }
        }
    }
    if let Some(i) = only {
        variants = variants.split_off(i).into_iter().take(1).collect();
    }

    println!("hidden,gain,targets,rank,scale,meta,joint,random,reduction_vs_random");
    for v in &variants {
        let spec = ModelSpec::Mlp {
            hidden: v.hidden.clone(),
            activation: Activation::Tanh,
            gain: v.gain,
            seed: 0,
        };
        let model = spec.build(&suite).unwrap();
        let targets: Vec<String> = v.targets.iter().map(|s| s.to_string()).collect();
        let mut sums = [0.0; 3];
        for &seed in seeds {
            let cfg = MetaConfig {
                seed,
                ..MetaConfig::default()
            };
            let init = init_adapters(&model, &targets, v.rank, v.scale, seed).unwrap();
            let score = |ad: &metalora::lora::AdapterSet| {
                evaluate_held_out(&model, ad, &held, suite.spec.loss(), &cfg, 32, seed)
                    .map(|s| s.mean)
                    .unwrap_or(f64::NAN)
            };
            let meta = run_training(&model, &suite, init.clone(), &cfg, TrainMethod::Meta)
                .map(|o| score(&o.adapters))
                .unwrap_or(f64::NAN);
            let joint = run_training(&model, &suite, init.clone(), &cfg, TrainMethod::Joint)
                .map(|o| score(&o.adapters))
                .unwrap_or(f64::NAN);
            let random = score(&init);
            sums[0] += meta;
            sums[1] += joint;
            sums[2] += random;
        }
        let n = seeds.len() as f64;
        let [m, j, r] = sums.map(|s| s / n);
        println!(
            "{:?},{},{},{},{},{m:.4},{j:.4},{r:.4},{:.3}",
            v.hidden,
            v.gain,
            v.targets.join("+"),
            v.rank,
            v.scale,
            1.0 - m / r
        );
    }
}
