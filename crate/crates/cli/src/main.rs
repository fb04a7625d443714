//! `dst`: batch driver for subset-tuning runs, deltas and analyses.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dst_core::harness::Activation;
use dst_core::partition::SiloScheme;

use commands::{CliError, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "dst", version, about = "Dynamic subset tuning on toy models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a seed model and write OUT/seed.dstc.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a config value (`key=value`); repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Fine-tune a seed and write a run directory.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Merge a delta into its seed.
    Apply {
        #[arg(long)]
        seed: PathBuf,
        #[arg(long)]
        delta: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the entries where a model differs from its seed.
    Diff {
        #[arg(long)]
        seed: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the pairwise subset overlap matrix of the given deltas.
    Overlap {
        #[arg(required = true)]
        deltas: Vec<PathBuf>,
    },
    /// Print the per-silo distribution of a delta's free parameters.
    Stats {
        #[arg(long)]
        delta: PathBuf,
        #[arg(long)]
        seed: PathBuf,
        #[arg(long, default_value = "per_module_and_layer")]
        granularity: SiloScheme,
    },
    /// Time dense merging against on-the-fly application.
    Bench {
        #[arg(long)]
        seed: PathBuf,
        #[arg(long = "delta", required = true)]
        deltas: Vec<PathBuf>,
        #[arg(long, default_value_t = 20)]
        repetitions: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value = "tanh")]
        activation: Activation,
    },
    /// Run the learning-rate by epsilon grid from the config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Also write sweep.csv and best_lr.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain {
            config,
            out,
            overrides,
        } => commands::cmd_pretrain(&config, &overrides, &out),
        Command::Finetune {
            config,
            seed,
            out,
            overrides,
        } => commands::cmd_finetune(&config, &overrides, &seed, &out),
        Command::Apply { seed, delta, out } => commands::cmd_apply(&seed, &delta, &out),
        Command::Diff { seed, model, out } => commands::cmd_diff(&seed, &model, &out),
        Command::Overlap { deltas } => commands::cmd_overlap(&deltas),
        Command::Stats {
            delta,
            seed,
            granularity,
        } => commands::cmd_stats(&delta, &seed, granularity),
        Command::Bench {
            seed,
            deltas,
            repetitions,
            batch,
            activation,
        } => commands::cmd_bench(&seed, &deltas, repetitions, batch, activation),
        Command::Sweep {
            config,
            out,
            overrides,
        } => commands::cmd_sweep(&config, &overrides, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
