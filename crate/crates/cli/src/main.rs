//! `egr`: refine complexes, score decoys, evaluate rankings, train models.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "egr", version, about = "Equivariant refinement and quality assessment of protein complexes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refine a complex and predict per-residue LDDT-Cα.
    Refine {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Feed the refined coordinates back in this many times in total.
        #[arg(long, default_value_t = 1)]
        iterations: usize,
    },
    /// Score a decoy against its native (DockQ family and LDDT-Cα).
    Score {
        #[arg(long)]
        decoy: PathBuf,
        #[arg(long)]
        native: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Top-N hit rates and ranking losses from predicted scores.
    Evaluate {
        /// CSV with columns target, decoy, predicted_score.
        #[arg(long)]
        scores: PathBuf,
        /// Directory holding <target>.pdb.
        #[arg(long)]
        natives: PathBuf,
        /// Directory holding <target>/<decoy>.pdb.
        #[arg(long)]
        decoys: PathBuf,
        #[arg(long, default_value_t = 10)]
        top_n: usize,
        #[arg(long)]
        summary: PathBuf,
        /// Scoring threads; defaults to the number of processors.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train a model on <id>_decoy.pdb / <id>_native.pdb pairs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train_dir: Option<PathBuf>,
        #[arg(long)]
        val_dir: Option<PathBuf>,
        #[arg(long)]
        out_weights: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Refine {
            input,
            weights,
            output,
            report,
            iterations,
        } => commands::refine(input, weights, output, report, *iterations),
        Command::Score { decoy, native, report } => commands::score(decoy, native, report),
        Command::Evaluate {
            scores,
            natives,
            decoys,
            top_n,
            summary,
            workers,
        } => commands::evaluate(scores, natives, decoys, *top_n, summary, *workers),
        Command::Train {
            config,
            train_dir,
            val_dir,
            out_weights,
        } => commands::train(config, train_dir.as_deref(), val_dir.as_deref(), out_weights.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}
