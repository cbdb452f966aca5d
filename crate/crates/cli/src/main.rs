use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hapo_core::analyze::{analyze_file, Report};
use hapo_core::compare::compare;
use hapo_core::config::{apply_override, parse_override, Components};
use hapo_core::{Algo, HapoError, TrainConfig};
use rayon::prelude::*;

/// Entropy-aware policy optimization on synthetic sequence tasks.
#[derive(Parser)]
#[command(name = "hapo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// grpo, dapo, dapo_fork or hapo.
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// Dotted key override, e.g. `clip.eps_high=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and print its directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; defaults to `$HAPO_RUNS_DIR/<algo>-seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One HAPO run per component combination (letters from ABCD; "" is DAPO).
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "flags", value_name = "FLAGS", required = true)]
        flags: Vec<String>,
        /// Parent directory for the runs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a diagnostic table from a token trace.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        /// clip_patterns, ratio_entropy, dual_entropy or entropy_landscape.
        #[arg(long)]
        report: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize two or more runs side by side.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<HapoError> for Failure {
    fn from(e: HapoError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load(args: &ConfigArgs, extra: &[(String, String)]) -> Result<TrainConfig, Failure> {
    let mut table = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    let mut overrides: Vec<(String, String)> = args.set.iter().map(|s| parse_override(s)).collect::<Result<_, _>>()?;
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(algo) = &args.algo {
        let algo: Algo = algo.parse()?;
        overrides.push(("algo".into(), format!("\"{algo}\"")));
    }
    if let Some(steps) = args.steps {
        overrides.push(("steps".into(), steps.to_string()));
    }
    overrides.extend_from_slice(extra);
    for (k, v) in &overrides {
        apply_override(&mut table, k, v)?;
    }
    Ok(TrainConfig::from_table(table)?)
}

fn runs_root() -> PathBuf {
    std::env::var_os("HAPO_RUNS_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn train_one(cfg: &TrainConfig, dir: &Path) -> Result<(), Failure> {
    let summary = hapo_core::run::run_with_progress(cfg, dir, |m| {
        if let Some(e) = m.eval_sampled {
            log::info!("step {} reward {:.3} eval {:.3} entropy {:.3}", m.step, m.mean_reward, e, m.mean_entropy);
        }
    })?;
    log::info!("{} finished: {:?}", dir.display(), summary.final_eval_sampled);
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { cfg, out } => {
            let cfg = load(&cfg, &[])?;
            let dir = out.unwrap_or_else(|| runs_root().join(format!("{}-seed{}", cfg.algo, cfg.seed)));
            train_one(&cfg, &dir)?;
            println!("{}", dir.display());
        }
        Command::Ablate { cfg: args, flags, out } => {
            let mut jobs = Vec::with_capacity(flags.len());
            for f in &flags {
                let label = Components::parse(f)?.label();
                let cfg = load(
                    &args,
                    &[
                        ("algo".into(), "\"hapo\"".into()),
                        ("hapo_components".into(), format!("\"{label}\"")),
                    ],
                )?;
                let name = if label.is_empty() { "none".to_string() } else { label };
                let dir = out.clone().unwrap_or_else(runs_root).join(format!("ablate-{name}-seed{}", cfg.seed));
                jobs.push((cfg, dir));
            }
            jobs.par_iter().map(|(cfg, dir)| train_one(cfg, dir)).collect::<Result<Vec<()>, _>>()?;
            for (_, dir) in &jobs {
                println!("{}", dir.display());
            }
        }
        Command::Analyze { trace, report, out } => {
            let report: Report = report.parse()?;
            analyze_file(&trace, report, &out)?;
            println!("{}", out.display());
        }
        Command::Compare { dirs } => print!("{}", compare(&dirs)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
