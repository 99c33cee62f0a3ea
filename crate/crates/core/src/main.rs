use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use sbmre::runner::{run_cli, Subcommand};

/// Branching random walks in random environment: simulation, exact oracles
/// and SPDE duality checks.
#[derive(Parser, Debug)]
#[command(name = "sbmre", version)]
struct Cli {
    #[arg(value_enum)]
    command: Subcommand,
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "sbmre-out")]
    out_dir: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, env = "SBMRE_WORKERS")]
    workers: Option<usize>,
    /// `key=value` edits applied before validation, e.g. `env.beta=0.5`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = run_cli(&cli.config, cli.command, &cli.out_dir, cli.workers, &cli.overrides);
    ExitCode::from(code as u8)
}
