//! `twta` — train, evaluate, prune, and report on task-winner-take-all
//! continual-learning models. Exit codes: 0 success, 1 environment/I-O
//! failure, 2 user error (bad flags, bad config, unknown task).

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use twta_cli::commands;

#[derive(Parser)]
#[command(name = "twta", version, about = "Continual learning with task-winner-take-all layers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a full continual training cycle from a config file.
    Train {
        /// Run configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Re-split the pooled digit corpus at this train fraction
        /// (pmnist only; the canonical split is the default).
        #[arg(long)]
        resplit: Option<f64>,
    },
    /// Task-aware accuracy and sparsity audit for one task of a checkpoint.
    Eval {
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Task id to evaluate under.
        #[arg(long)]
        task: usize,
        /// Data descriptor: run:<dir>:<train|test> or idx:<images>:<labels>.
        #[arg(long)]
        data: String,
    },
    /// Export one task's winner subnetwork as a standalone file.
    Prune {
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Task id to prune for.
        #[arg(long)]
        task: usize,
        /// Output file for the pruned export.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-emit metrics, the text table, and SVG plots for a finished run.
    Report {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Gradient checks, sampling checks, and a structural audit.
    Selftest,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train {
            config,
            seed,
            out,
            resplit,
        } => commands::cmd_train(&config, seed, out, resplit),
        Cmd::Eval { ckpt, task, data } => commands::cmd_eval(&ckpt, task, &data),
        Cmd::Prune { ckpt, task, out } => commands::cmd_prune(&ckpt, task, &out),
        Cmd::Report { run } => commands::cmd_report(&run),
        Cmd::Selftest => commands::cmd_selftest(),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
