//! `noteacher` — config-driven experiment harness: dataset generation,
//! annotation-budget sampling, distribution-mismatch construction, training,
//! evaluation, aggregation, and training-dynamics plots.
//!
//! Exit codes are a stable scripting contract: 0 success, 1 configuration
//! error, 2 data error, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use noteacher::error::{Error, Result};

mod commands;
mod config;
mod runs;
mod svg;

use config::ExperimentConfig;

/// Environment variable naming the default output root.
const OUT_ENV: &str = "NOTEACHER_OUT";

#[derive(Parser, Debug)]
#[command(
    name = "noteacher",
    version,
    about = "Semi-supervised learning experiments with paired consistency networks"
)]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (default: config out_dir, then $NOTEACHER_OUT, then ".").
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic datasets and write them as CSV plus manifest.
    Gen,
    /// Simulate annotation over the configured budgets; write split manifests.
    Sample,
    /// Build the configured class-distribution-mismatch splits.
    Mismatch,
    /// Train every configured method over every scope and seed.
    Train,
    /// Re-evaluate a finished run's best model; print the metrics report.
    Eval { run: String },
    /// Aggregate finished runs into a method-by-scope table of AUROC.
    Compare,
    /// Merge two runs' validation histories into a CSV and dual-axis SVG.
    Dynamics { run_a: String, run_b: String },
}

fn out_root(cli: &Cli, config: &ExperimentConfig, base: &Path) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    if let Some(out) = &config.out_dir {
        return if out.is_absolute() {
            out.clone()
        } else {
            base.join(out)
        };
    }
    if let Ok(out) = std::env::var(OUT_ENV) {
        if !out.is_empty() {
            return PathBuf::from(out);
        }
    }
    PathBuf::from(".")
}

fn run(cli: &Cli) -> Result<()> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let config = ExperimentConfig::load(config_path)?;
    let base = config_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_owned();
    let out = out_root(cli, &config, &base);
    std::fs::create_dir_all(&out)?;
    match &cli.command {
        Command::Gen => commands::cmd_gen(&config, &base, &out, cli.seed, cli.quiet),
        Command::Sample => commands::cmd_sample(&config, &base, &out, cli.seed, cli.quiet),
        Command::Mismatch => commands::cmd_mismatch(&config, &base, &out, cli.seed, cli.quiet),
        Command::Train => commands::cmd_train(&config, &base, &out, cli.seed, cli.quiet),
        Command::Eval { run } => commands::cmd_eval(&config, &base, &out, run, cli.quiet),
        Command::Compare => commands::cmd_compare(&config, &base, &out, cli.seed, cli.quiet),
        Command::Dynamics { run_a, run_b } => {
            commands::cmd_dynamics(&config, &base, &out, run_a, run_b, cli.quiet)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // configuration problem under the exit-code contract.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = if e.is_config() {
                1
            } else if e.is_data() {
                2
            } else {
                3
            };
            ExitCode::from(code)
        }
    }
}
