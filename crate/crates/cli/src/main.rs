use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use resilab::controller::LearningState;
use resilab::engine::Verdict;
use resilab::export::write_exports;
use resilab::identity::{classify_trace, Candidates, IdentityClass, WindowStats};
use resilab::reflection::read_delta_trace_csv;
use resilab::scenario::ConfigError;
use resilab::{run_scenario, RunOptions, RunResult, Scenario};

/// Simulate sensing systems under drift and shocks, and classify their
/// timing identity.
#[derive(Parser)]
#[command(name = "resilab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its exports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `engine.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// `learning.json` from an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Classify a delta trace (CSV with `time` and `delta` columns).
    Classify {
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        contract: ContractArgs,
        /// Trailing samples to classify; the whole trace by default.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Run every matching config several times with consecutive seeds.
    Batch {
        #[arg(long)]
        glob: String,
        #[arg(long, default_value_t = 1)]
        reps: u64,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "batch")]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ContractArgs {
    #[arg(long, value_name = "T")]
    hard: Option<f64>,
    #[arg(long, num_args = 2, value_names = ["T", "SIGMA"])]
    soft: Option<Vec<f64>>,
    #[arg(long, value_name = "B")]
    best_effort: Option<f64>,
}

impl ContractArgs {
    fn class(&self) -> IdentityClass {
        if let Some(t) = self.hard {
            IdentityClass::HardRt { t }
        } else if let Some(v) = &self.soft {
            IdentityClass::SoftRt { t: v[0], sigma: v[1] }
        } else {
            IdentityClass::BestEffort {
                b: self.best_effort.expect("clap enforces one contract flag"),
            }
        }
    }
}

const OK: u8 = 0;
const RUNTIME: u8 = 1;
const INVALID: u8 = 2;

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn report(self) -> u8 {
        match self {
            Failure::Invalid(m) => {
                eprintln!("error: {m}");
                INVALID
            }
            Failure::Runtime(m) => {
                eprintln!("error: {m}");
                RUNTIME
            }
        }
    }
}

fn load_config(path: &Path) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    Scenario::load(&text).map_err(|e| match e {
        ConfigError::Parse(_) | ConfigError::Invalid(_) => Failure::Invalid(format!("{}: {e}", path.display())),
    })
}

fn load_learning(path: &Path) -> Result<BTreeMap<String, LearningState>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let raw: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    raw.into_iter()
        .map(|(node, v)| {
            LearningState::from_json(&v.to_string())
                .map(|s| (node.clone(), s))
                .map_err(|e| Failure::Invalid(format!("{}: node {node}: {e}", path.display())))
        })
        .collect()
}

fn execute(scenario: &Scenario, options: &RunOptions, out: &Path) -> Result<RunResult, Failure> {
    let result = run_scenario(scenario, options).map_err(|e| match e {
        resilab::engine::EngineError::Config(c) => Failure::Invalid(c.to_string()),
        other => Failure::Runtime(other.to_string()),
    })?;
    write_exports(&result, out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    Ok(result)
}

fn cmd_run(config: &Path, seed: Option<u64>, out: &Path, resume: Option<&Path>) -> Result<(), Failure> {
    let mut scenario = load_config(config)?;
    if let Some(seed) = seed {
        scenario.engine.seed = seed;
    }
    let options = RunOptions {
        learning: resume.map(load_learning).transpose()?.unwrap_or_default(),
        ..Default::default()
    };
    let r = execute(&scenario, &options, out)?;
    let verdict = match &r.antifragility {
        Ok(a) => format!("{:?}", a.verdict),
        Err(e) => e.to_string(),
    };
    println!("{} ticks, {} episodes, {verdict}; wrote {}", r.ticks, r.episodes.len(), out.display());
    Ok(())
}

fn cmd_classify(trace: &Path, contract: IdentityClass, window: Option<usize>) -> Result<(), Failure> {
    let file = fs::File::open(trace).map_err(|e| Failure::Invalid(format!("{}: {e}", trace.display())))?;
    let trace_data = read_delta_trace_csv(file).map_err(|e| Failure::Invalid(format!("{}: {e}", trace.display())))?;
    if trace_data.is_empty() {
        return Err(Failure::Invalid(format!("{}: trace has no samples", trace.display())));
    }
    contract.check().map_err(|e| Failure::Invalid(e.to_string()))?;
    let window = window.unwrap_or(trace_data.len());
    let class = classify_trace(&trace_data, &Candidates::for_contract(&contract), window)
        .map_err(|e| Failure::Invalid(e.to_string()))?;
    let stats = WindowStats::of(trace_data.samples[trace_data.len() - window..].iter().map(|s| s.delta));
    let parameters = match class {
        IdentityClass::HardRt { t } => json!({ "t": t }),
        IdentityClass::SoftRt { t, sigma } => json!({ "t": t, "sigma": sigma }),
        IdentityClass::BestEffort { b } => json!({ "b": b }),
        IdentityClass::NonRt => json!({}),
    };
    println!(
        "{}",
        json!({
            "class": class.name(),
            "parameters": parameters,
            "window_stats": {
                "count": stats.count,
                "max_abs": stats.max_abs,
                "mean_abs": stats.mean_abs,
                "std_abs": stats.std_abs,
            },
        })
    );
    Ok(())
}

struct Job {
    scenario: String,
    config: PathBuf,
    seed: u64,
    dir: PathBuf,
}

fn summary_row(job: &Job, outcome: &Result<RunResult, Failure>) -> Vec<String> {
    let mut row = vec![job.scenario.clone(), job.seed.to_string()];
    match outcome {
        Ok(r) => {
            let (verdict, slope) = match &r.antifragility {
                Ok(a) => (
                    match a.verdict {
                        Verdict::Antifragile => "Antifragile",
                        Verdict::Robust => "Robust",
                        Verdict::Fragile => "Fragile",
                    }
                    .to_string(),
                    a.slope.to_string(),
                ),
                Err(_) => ("InsufficientEpisodes".into(), "none".into()),
            };
            let mean = if r.episodes.is_empty() {
                "none".to_string()
            } else {
                (r.episodes.iter().map(|e| e.cost).sum::<f64>() / r.episodes.len() as f64).to_string()
            };
            row.extend([verdict, slope, mean]);
        }
        Err(_) => row.extend(["error".into(), "none".into(), "none".into()]),
    }
    row
}

fn cmd_batch(pattern: &str, reps: u64, seed_base: u64, jobs: usize, out: &Path) -> Result<(), Failure> {
    let configs: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| Failure::Invalid(format!("bad glob {pattern:?}: {e}")))?
        .filter_map(Result::ok)
        .filter(|p| p.is_file())
        .collect();
    if configs.is_empty() {
        return Err(Failure::Invalid(format!("no config matches {pattern:?}")));
    }
    let mut work = Vec::new();
    for config in &configs {
        let scenario = config.file_stem().map_or("scenario".into(), |s| s.to_string_lossy().into_owned());
        for rep in 0..reps {
            let seed = seed_base + rep;
            work.push(Job {
                dir: out.join(&scenario).join(format!("seed-{seed}")),
                scenario: scenario.clone(),
                config: config.clone(),
                seed,
            });
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let outcomes: Vec<Result<RunResult, Failure>> = pool.install(|| {
        work.par_iter()
            .map(|job| {
                let mut s = load_config(&job.config)?;
                s.engine.seed = job.seed;
                execute(&s, &RunOptions::default(), &job.dir)
            })
            .collect()
    });

    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Failure::Runtime(e.to_string());
    w.write_record(["scenario", "seed", "verdict", "slope", "mean_episode_cost"]).map_err(io)?;
    let mut failed = 0;
    for (job, outcome) in work.iter().zip(&outcomes) {
        w.write_record(summary_row(job, outcome)).map_err(io)?;
        if let Err(f) = outcome {
            failed += 1;
            let m = match f {
                Failure::Invalid(m) | Failure::Runtime(m) => m,
            };
            eprintln!("error: {} seed {}: {m}", job.scenario, job.seed);
        }
    }
    let bytes = w.into_inner().map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(out.join("summary.csv"), bytes).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{} runs, {failed} failed; summary in {}", work.len(), out.join("summary.csv").display());
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} runs failed", work.len())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            seed,
            out,
            resume,
        } => cmd_run(config, *seed, out, resume.as_deref()),
        Command::Classify {
            trace,
            contract,
            window,
        } => cmd_classify(trace, contract.class(), *window),
        Command::Batch {
            glob,
            reps,
            seed_base,
            jobs,
            out,
        } => cmd_batch(glob, *reps, *seed_base, *jobs, out),
    };
    ExitCode::from(match result {
        Ok(()) => OK,
        Err(f) => f.report(),
    })
}
