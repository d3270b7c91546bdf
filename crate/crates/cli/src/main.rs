use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Exit 2 for anything the user can fix by changing arguments or config, 1 otherwise.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<cotn::Error> for CliError {
    fn from(e: cotn::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(name = "cotn", version, about = "Chaotic-oscillator activations and forecasting toolkit")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for independent trials.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Override a config value, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sweep a constant input and record the settled outputs.
    Bifurcate(BifurcateArgs),
    /// Export a tabulated meta-activation.
    Table(TableArgs),
    /// Write the synthetic benchmark series as CSV.
    Synth(SynthArgs),
    /// Train a forecaster, or several seeds of one.
    Train,
    /// Score a trained forecaster on its splits.
    Eval(RunDirArgs),
    /// Forecast the horizon after the last row of the data.
    Forecast(RunDirArgs),
    /// Train one gated model per oscillator type and rank them.
    SweepTypes,
    /// Per-step reconstruction errors of every window.
    Anomaly(AnomalyArgs),
}

#[derive(Args, Debug)]
pub struct BifurcateArgs {
    #[arg(long = "type")]
    pub type_id: u8,
    #[arg(long, default_value = "-1:1", allow_hyphen_values = true)]
    pub range: String,
    /// Number of input values.
    #[arg(long, default_value_t = 401)]
    pub n: usize,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 100)]
    pub keep_last: usize,
}

#[derive(Args, Debug)]
pub struct TableArgs {
    #[arg(long = "type")]
    pub type_id: u8,
    #[arg(long, default_value = "-4:4", allow_hyphen_values = true)]
    pub range: String,
    #[arg(long, default_value_t = 4001)]
    pub nodes: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub len: usize,
    #[arg(long, default_value_t = 0)]
    pub spikes: usize,
    #[arg(long, default_value_t = 10.0)]
    pub magnitude: f64,
}

#[derive(Args, Debug)]
pub struct RunDirArgs {
    /// Output directory of a previous `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Score this CSV instead of the data the run was trained on.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnomalyArgs {
    /// Directory of a saved autoencoder; one is trained on the training split otherwise.
    #[arg(long)]
    pub ae: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("see `cotn help` for usage");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
