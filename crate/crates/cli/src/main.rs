mod commands;
mod config;
mod exit;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use remix_core::evaluation::{
    DEFAULT_GRID_BOUND, DEFAULT_GRID_RESOLUTION, DEFAULT_IWAE_SAMPLES, DEFAULT_TIMING_BATCH, DEFAULT_TIMING_REPEATS,
};

use commands::{EvalArgs, Split, VizArgs};
use exit::CliError;

#[derive(Parser)]
#[command(name = "remix", version, about = "Recursive mixture inference for VAEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoint and run manifest.
    Train {
        /// JSON config; a run manifest is accepted too. Defaults apply without one.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted override, e.g. `--set dataset.n=500`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory.
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Importance-weighted log-likelihood of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config, manifest or dataset spec; defaults to the config next to the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(short, long, default_value_t = DEFAULT_IWAE_SAMPLES)]
        k: usize,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV to append the result to; defaults to eval.csv next to the checkpoint.
        #[arg(long)]
        append: Option<PathBuf>,
    },
    /// Write true-posterior, mixture and component density grids for one example.
    VizPosterior {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Row within the split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out_prefix: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = DEFAULT_GRID_BOUND)]
        bound: f64,
        #[arg(long, default_value_t = DEFAULT_GRID_RESOLUTION)]
        resolution: usize,
    },
    /// Time full-mixture inference over the test split.
    BenchInference {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TIMING_BATCH)]
        batch_size: usize,
        #[arg(long, default_value_t = DEFAULT_TIMING_REPEATS)]
        repeats: usize,
    },
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { config, overrides, out } => {
            let seed_env = std::env::var(config::SEED_ENV).ok();
            let config = config::resolve(config.as_deref(), &overrides, seed_env.as_deref())?;
            commands::cmd_train(config, &out)
        }
        Command::Eval {
            checkpoint,
            data,
            k,
            batch_size,
            split,
            seed,
            append,
        } => commands::cmd_eval(EvalArgs {
            checkpoint: &checkpoint,
            data: data.as_deref(),
            k,
            batch_size,
            split,
            seed,
            append,
        }),
        Command::VizPosterior {
            checkpoint,
            data,
            index,
            out_prefix,
            split,
            bound,
            resolution,
        } => commands::cmd_viz_posterior(VizArgs {
            checkpoint: &checkpoint,
            data: data.as_deref(),
            index,
            out_prefix: &out_prefix,
            split,
            bound,
            resolution,
        }),
        Command::BenchInference {
            checkpoint,
            data,
            batch_size,
            repeats,
        } => commands::cmd_bench_inference(&checkpoint, data.as_deref(), batch_size, repeats),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // usage errors exit 1 so that 2 keeps meaning "dataset problem"
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::code::FAILURE as u8 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
