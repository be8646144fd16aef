use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ptrm_core::harness::{self, RunConfig, OUT_DIR_ENV};
use ptrm_core::Error;

#[derive(Parser)]
#[command(
    name = "ptrm",
    version,
    about = "Train and probe tiny recursive reasoning models"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,

    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Checkpoint directory to read.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Override any setting, e.g. `--set train.lr=0.002`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    /// Generate puzzles and write the dataset.
    GenData,
    /// Train a model.
    Train,
    /// Evaluate a checkpoint.
    Eval,
    /// Noise-scale sweep of stochastic rollouts.
    Sweep,
    /// Dump per-step latents of one puzzle.
    Trace,
    /// Summarize outputs and apply checks.
    Report,
}

fn run(cli: Cli) -> Result<String, Error> {
    let mut overrides = Vec::new();
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s}")))?;
        overrides.push((k.trim().to_string(), v.to_string()));
    }
    let quote = |p: &PathBuf| serde_json::to_string(p).unwrap_or_default();
    if let Some(p) = &cli.out_dir {
        overrides.push(("out_dir".into(), quote(p)));
    }
    if let Some(p) = &cli.checkpoint {
        overrides.push(("checkpoint".into(), quote(p)));
    }
    if let Some(w) = cli.workers {
        overrides.push(("workers".into(), w.to_string()));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let out = match cli.verb {
        Verb::GenData => harness::cmd_gen_data(&cfg),
        Verb::Train => harness::cmd_train(&cfg),
        Verb::Eval => harness::cmd_eval(&cfg),
        Verb::Sweep => harness::cmd_sweep(&cfg),
        Verb::Trace => harness::cmd_trace(&cfg),
        Verb::Report => harness::cmd_report(&cfg),
    }?;
    Ok(out.summary)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::CheckFailed(_) => 3,
                e if e.is_config() => 1,
                _ => 2,
            })
        }
    }
}
