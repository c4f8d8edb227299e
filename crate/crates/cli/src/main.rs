use std::process::ExitCode;

use clap::{Parser, Subcommand};
use memattn_cli::commands::{cmd_approx, cmd_bench, cmd_flops, run_verify, CliError, Output};
use memattn_cli::config::{ConfigError, RunArgs, RunConfig};
use memattn_cli::THREADS_ENV;

/// Exact and pooled memory cross-attention: invariant checks, error
/// sweeps, timings and operation counts.
///
/// Exit status: 0 success, 1 failed check, 2 configuration error, 3 I/O
/// error. Set MEMATTN_THREADS to fix the worker-thread count.
#[derive(Parser)]
#[command(name = "memattn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant suite on seeded random instances.
    Verify(RunArgs),
    /// Sweep variant x pooling x bandwidth x seed and report errors.
    Approx(RunArgs),
    /// Median wall-clock time per variant, with speedup over exact.
    Bench(RunArgs),
    /// Closed-form operation counts; runs no kernels.
    Flops(RunArgs),
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        ConfigError::new(
            THREADS_ENV,
            format!("expected a positive integer, got {raw:?}"),
        )
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ConfigError::new(THREADS_ENV, e.to_string()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Verify(args) => run_verify(&RunConfig::resolve(&args, RunConfig::default())?),
        Command::Approx(args) => {
            let config = RunConfig::resolve(&args, RunConfig::default())?;
            let out = Output::open(&config)?;
            out.write(&config, &cmd_approx(&config)?)
        }
        Command::Bench(args) => {
            let base = RunConfig {
                variants: vec!["exact".into(), "efficient".into()],
                ..RunConfig::default()
            };
            let config = RunConfig::resolve(&args, base)?;
            let out = Output::open(&config)?;
            out.write(&config, &cmd_bench(&config)?)
        }
        Command::Flops(args) => {
            let config = RunConfig::resolve(&args, RunConfig::default())?;
            let out = Output::open(&config)?;
            out.write(&config, &cmd_flops(&config)?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("memattn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
