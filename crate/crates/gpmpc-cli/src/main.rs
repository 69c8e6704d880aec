//! Command-line front end for the batch-to-batch GP model-learning MPC
//! experiments: run the learning loop, run the PI / full-model reference
//! controllers, or replay logged decisions for bit-exact verification. All
//! results land as CSV/JSON artifacts for external plotting — there is no
//! interactive UI.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "gpmpc", version, about = "Batch-to-batch GP model-learning MPC experiments")]
struct Cli {
    /// Log filter: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a learning experiment: one PI seed batch plus N GP-controlled
    /// batches per seed, with all artifacts written to the output directory.
    Run {
        /// Experiment TOML.
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Concurrent seed workers.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Run only this one seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Run a single-batch reference controller over the experiment's seeds.
    Benchmark {
        /// Which reference controller to run.
        #[arg(value_enum)]
        which: commands::BenchmarkKind,
        /// Experiment TOML (for plant, seeds, noise streams, objective).
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only this one seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Re-execute the controller decisions recorded by a finished run and
    /// verify the applied controls bit-for-bit.
    Replay {
        /// manifest.toml written by `run`.
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            jobs,
            seed_override,
        } => commands::cmd_run(&config, out.as_deref(), jobs, seed_override),
        Command::Benchmark {
            which,
            config,
            out,
            seed_override,
        } => commands::cmd_benchmark(&config, which, out.as_deref(), seed_override),
        Command::Replay { manifest } => commands::cmd_replay(&manifest),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
