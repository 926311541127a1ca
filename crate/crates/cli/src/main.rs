mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Failure;

#[derive(Parser, Debug)]
#[command(name = "bubblelab", version, about = "Adversarial bubble experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Experiment config (JSON). Missing sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory for artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Arithmetic for training, attacks and evaluation.
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,

    /// Flush subnormal results to zero (32-bit modes only).
    #[arg(long, global = true)]
    pub flush_to_zero: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
    Tf32,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic bubble/swatch dataset.
    GenData(commands::GenDataArgs),
    /// Train a classifier on a dataset file.
    Train(commands::TrainArgs),
    /// Robust accuracy of a trained classifier over the budget list.
    Attack(commands::AttackArgs),
    /// Zero-gradient probe under each precision mode.
    Diagnose(commands::DiagnoseArgs),
    /// Print-scan channel, with and without a trained denoiser.
    Channel(commands::ChannelArgs),
    /// Election impact: closed form, Monte Carlo and flip thresholds.
    Impact(commands::ImpactArgs),
    /// Merge the markdown tables of earlier runs into one document.
    Report(commands::ReportArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&cli.global, &a),
        Command::Train(a) => commands::train(&cli.global, &a),
        Command::Attack(a) => commands::attack(&cli.global, &a),
        Command::Diagnose(a) => commands::diagnose(&cli.global, &a),
        Command::Channel(a) => commands::channel(&cli.global, &a),
        Command::Impact(a) => commands::impact(&cli.global, &a),
        Command::Report(a) => commands::report(&cli.global, &a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(Failure::of(&e).code())
        }
    }
}
