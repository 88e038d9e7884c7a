//! `hng`: dataset synthesis, training, evaluation, diagnostics and ablation
//! sweeps from one JSON run config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::LevelFilter;

mod commands;
mod run;

#[derive(Parser, Debug)]
#[command(
    name = "hng",
    version,
    about = "Correlation-aware hard negative generation for metric learning"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON run config; compiled defaults are used for anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training seed (the generator seed for `synth-data`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root directory for run directories and reports.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: LevelFilter,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic labeled feature file.
    SynthData(commands::synth::SynthArgs),
    /// Train one arm and keep per-epoch checkpoints.
    Train(commands::train::TrainArgs),
    /// Retrieval metrics of a checkpoint.
    Eval(commands::eval::EvalArgs),
    /// Dump attention maps, coefficient histograms and embedding statistics.
    Inspect(commands::inspect::InspectArgs),
    /// Train several arms over several seeds and tabulate the results.
    Ablate(commands::ablate::AblateArgs),
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<hng_core::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.global.log_level)
        .format_timestamp(None)
        .init();
    let g = &cli.global;
    let result = match cli.command {
        Command::SynthData(a) => commands::synth::run(g, &a),
        Command::Train(a) => commands::train::run(g, &a),
        Command::Eval(a) => commands::eval::run(g, &a),
        Command::Inspect(a) => commands::inspect::run(g, &a),
        Command::Ablate(a) => commands::ablate::run(g, &a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
