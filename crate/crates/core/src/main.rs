use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dice_core::harness::{self, ExperimentConfig};

/// Team policy optimization with collaborative exploration and diversity
/// regularization.
#[derive(Parser)]
#[command(name = "dice", version)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of one config.
    Run {
        config: PathBuf,
        /// Override a config key by dotted path, e.g. `onpolicy.agents=3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Team-size sweep at fixed total batch.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,10")]
        k: Vec<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Ablation matrix: full, no_ce, no_dr, dvn, na, no_tsc, no_du.
    Ablate {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Per-variant best-agent return (mean ± std over seeds).
    Summarize { dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let load = |path: &PathBuf, overrides: &[String]| ExperimentConfig::load_with_overrides(path, overrides);
    let result = match &cli.command {
        Command::Run { config, overrides } => load(config, overrides).and_then(|c| harness::run(&c)).map(report),
        Command::Sweep { config, k, overrides } => load(config, overrides).and_then(|c| harness::sweep(&c, k)).map(report),
        Command::Ablate { config, overrides } => load(config, overrides).and_then(|c| harness::ablate(&c)).map(report),
        Command::Summarize { dir } => harness::summarize(dir).map(|s| print!("{}", s.render())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn report(manifests: Vec<harness::Manifest>) {
    for m in manifests {
        for r in &m.runs {
            let status = match &r.status {
                harness::RunStatus::Completed => "completed".to_string(),
                harness::RunStatus::NonFiniteGuard { what, iteration, .. } => {
                    format!("non-finite guard at iteration {iteration} ({what})")
                }
            };
            println!("{}/{}: {} iterations, {} env steps, {status}", m.variant, r.metrics_file, r.iterations, r.env_steps);
        }
    }
}
