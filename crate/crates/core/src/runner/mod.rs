//! Config-driven experiments behind the `horkd` binary.
pub mod config;
pub mod experiments;
pub mod gradsuite;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;
pub use config::{default_ablation, AblationSubset, ExperimentConfig, ModelConfig, StageConfig};
pub use experiments::{cmd_ablate, cmd_eval, cmd_train, mean_std, RunRow, SummaryRow};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_THRESHOLD: i32 = 3;

pub const OUTPUT_DIR_ENV: &str = "HORKD_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "horkd", version, about = "Hybrid-order relational knowledge distillation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Validate and print the resolved config without computing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Run only this seed instead of the configured list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for independent seeds and grid cells.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Two-stage distillation per seed plus direct and no-distillation baselines.
    Train,
    /// Loss-subset grid with no-distillation and soft-target rows.
    Ablate,
    /// Finite-difference check of every op and loss.
    Gradcheck,
    /// Re-derive summaries from reports and score the saved students.
    Eval,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Loads the config and applies `--seed` and the output-dir override.
pub fn resolve_config(cli: &Cli, env_output: Option<PathBuf>) -> crate::Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(dir) = env_output {
        cfg.output_dir = dir;
    }
    Ok(cfg)
}

fn print_summary(rows: &[SummaryRow]) {
    println!("{:<16} {:>3} {:>10} {:>10}", "method", "n", "mean_acc", "std_acc");
    for r in rows {
        println!(
            "{:<16} {:>3} {:>10.4} {:>10.4}",
            r.method, r.n, r.mean_test_acc, r.std_test_acc
        );
    }
}

/// Gradient suite with an optional deliberately corrupted case.
pub fn gradcheck(out: Option<&std::path::Path>, corrupt: Option<&str>) -> crate::Result<bool> {
    let rows = gradsuite::run_suite(corrupt)?;
    let mut buf = Vec::new();
    gradsuite::write_csv(&rows, &mut buf)?;
    std::io::stdout().write_all(&buf)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("gradcheck.csv"), &buf)?;
    }
    Ok(rows.iter().all(gradsuite::SuiteRow::passed))
}

fn dispatch(cli: &Cli, env_output: Option<PathBuf>) -> crate::Result<i32> {
    if cli.command == Command::Gradcheck && cli.config.is_none() {
        if cli.dry_run {
            return Ok(EXIT_OK);
        }
        return Ok(if gradcheck(env_output.as_deref(), None)? { EXIT_OK } else { EXIT_THRESHOLD });
    }
    let cfg = resolve_config(cli, env_output)?;
    if cli.dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(EXIT_OK);
    }
    match cli.command {
        Command::Train => print_summary(&cmd_train(&cfg, cli.jobs)?),
        Command::Ablate => print_summary(&cmd_ablate(&cfg, cli.jobs)?),
        Command::Gradcheck => {
            if !gradcheck(Some(&cfg.output_dir), None)? {
                return Ok(EXIT_THRESHOLD);
            }
        }
        Command::Eval => {
            let outcome = cmd_eval(&cfg)?;
            println!("seed,method,top1_error,top5_error,verification_acc");
            for r in &outcome.rows {
                println!(
                    "{},{},{:.4},{:.4},{:.4}",
                    r.seed, r.method, r.top1_error, r.top5_error, r.verification_acc
                );
            }
            if !outcome.mismatches.is_empty() {
                for p in &outcome.mismatches {
                    eprintln!("error: {} does not match its reports", p.display());
                }
                return Ok(EXIT_THRESHOLD);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Runs one command and maps the outcome to a process exit code.
pub fn run(cli: &Cli) -> i32 {
    let env_output = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from);
    match dispatch(cli, env_output) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
