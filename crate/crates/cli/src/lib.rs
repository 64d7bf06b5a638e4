//! `tide` command line: argument parsing and subcommand dispatch.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use crate::error::CliError;

type Handler = fn(&config::RunConfig, &std::path::Path) -> Result<(), CliError>;

#[derive(Parser)]
#[command(
    name = "tide",
    version,
    about = "Resolution-extrapolation experiments on a toy MM-DiT"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Timestep, temperature, bias and shift tables.
    Schedule(Common),
    /// Text-mass sweep and influence maps.
    Analyze(Common),
    /// Euler sampling under each method preset.
    Sample(Common),
    /// Time the fused attention kernel.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `model.timeshift.steps=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory [default: config `out`, else `out`].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, S>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(CliError::Usage)?;
    let (common, f): (Common, Handler) = match cli.command {
        Command::Schedule(c) => (c, commands::schedule),
        Command::Analyze(c) => (c, commands::analyze),
        Command::Sample(c) => (c, commands::sample),
        Command::Bench(c) => (c, commands::bench),
    };
    let mut cfg = config::load(common.config.as_deref(), &common.sets)?;
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = common.out {
        cfg.out = Some(out);
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;
    f(&cfg, &out)
}

/// Process entry point: logging, [`run`] on `std::env::args`, exit code.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => e.exit(),
        Err(e) => {
            eprintln!("tide: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
