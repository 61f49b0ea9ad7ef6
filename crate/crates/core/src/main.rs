use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metalora::gradcheck::{self, DEFAULT_STEP, DEFAULT_TOLERANCE};
use metalora::harness::{
    compare, evaluate_adapter, export_suite, prepare, train_to_dir, CompareOptions, HarnessError, MethodTag,
    Preset, RunConfig,
};
use metalora::lora::AdapterSet;

#[derive(Parser)]
#[command(name = "metalora", version, about = "Episodic meta-training of low-rank adapters")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Overrides the training seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the configuration's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a shared adapter and write adapter, metrics and summary.
    Train,
    /// Score an adapter file on held-out tasks.
    Evaluate {
        #[arg(long)]
        adapter: PathBuf,
        /// Label stored in the report.
        #[arg(long, default_value = "adapter")]
        method: String,
    },
    /// Train and score several methods under identical settings.
    Compare {
        /// Comma-separated rows built from the base config: meta, sta, joint, random-init.
        #[arg(long, value_delimiter = ',', default_value = "meta,joint,random-init")]
        methods: Vec<String>,
        /// Expand each trained method over the learning-rate grid.
        #[arg(long)]
        lr_grid: bool,
        #[arg(long)]
        allow_budget_mismatch: bool,
        /// Extra complete configs, one row each.
        configs: Vec<PathBuf>,
    },
    /// Finite-difference check of every primitive and loss.
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::DEFAULT_POINTS)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        check_seed: u64,
    },
    /// Write the episodes a training run would consume as JSON lines.
    ExportSuite {
        /// Destination file (defaults to <out>/episodes.jsonl).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(g: &Global) -> Result<RunConfig, HarnessError> {
    let mut cfg = match (&g.config, g.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(p)) => RunConfig::preset(p).normalized(),
        (None, None) => {
            return Err(HarnessError::Config(
                "pass --config <file> or --preset <sinusoid|low-rank|sequence>".into(),
            ))
        }
    };
    if let Some(s) = g.seed {
        cfg.meta.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn say(quiet: bool, msg: &str) {
    if !quiet {
        println!("{msg}");
    }
}

fn write_report(path: &Path, value: &impl serde::Serialize) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| HarnessError::Io {
            path: parent.into(),
            source,
        })?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.into(),
        source,
    })
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let g = &cli.global;
    match cli.command {
        Command::Gradcheck { points, check_seed } => {
            let report = gradcheck::run_gradcheck_with(
                &gradcheck::registry(),
                points,
                DEFAULT_STEP,
                DEFAULT_TOLERANCE,
                check_seed,
            );
            if !g.quiet {
                print!("{}", report.render());
            }
            if !report.all_passed() {
                let names: Vec<String> = report
                    .failures()
                    .iter()
                    .map(|f| format!("{} (max rel err {:.3e})", f.name, f.max_rel_error))
                    .collect();
                return Err(HarnessError::GradcheckFailed(names.join(", ")));
            }
            Ok(())
        }
        Command::Train => {
            let cfg = load_config(g)?;
            let p = prepare(&cfg)?;
            let dir = p.config.output_dir.clone();
            let (summary, _) = train_to_dir(&p, &dir)?;
            say(
                g.quiet,
                &format!(
                    "trained {} for {} iterations ({} examples); final query loss {:.6}; wrote {}",
                    summary.method.as_str(),
                    summary.iterations_completed,
                    summary.examples_consumed,
                    summary.final_query_loss.unwrap_or(f64::NAN),
                    dir.display()
                ),
            );
            Ok(())
        }
        Command::Evaluate { adapter, method } => {
            let cfg = load_config(g)?;
            let p = prepare(&cfg)?;
            let adapters = AdapterSet::load(&adapter)?;
            let report = evaluate_adapter(&p, &adapters, &method, 0)?;
            write_report(&p.config.output_dir.join("eval_report.json"), &report)?;
            say(g.quiet, &report.summary_line());
            Ok(())
        }
        Command::Compare {
            methods,
            lr_grid,
            allow_budget_mismatch,
            configs,
        } => {
            let base = load_config(g)?;
            let methods = methods
                .iter()
                .map(|m| {
                    MethodTag::parse(m.trim())
                        .ok_or_else(|| HarnessError::Config(format!("unknown method {m:?} in --methods")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let extra = configs
                .iter()
                .map(|c| RunConfig::load(c))
                .collect::<Result<Vec<_>, _>>()?;
            let opts = CompareOptions {
                methods,
                extra,
                lr_grid,
                allow_budget_mismatch,
            };
            let quiet = g.quiet;
            let report = compare(&base, &opts, &base.output_dir, |line| {
                if !quiet {
                    eprintln!("{line}");
                }
            })?;
            say(quiet, &report.to_table());
            Ok(())
        }
        Command::ExportSuite { output } => {
            let cfg = load_config(g)?;
            let p = prepare(&cfg)?;
            let path = output.unwrap_or_else(|| p.config.output_dir.join("episodes.jsonl"));
            let n = export_suite(&p, &path)?;
            say(g.quiet, &format!("wrote {n} examples to {}", path.display()));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            ExitCode::from(u8::try_from(code).unwrap_or(1))
        }
    }
}
