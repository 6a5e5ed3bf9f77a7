//! The `off` command line: dataset generation, two-stage training,
//! evaluation, the verification suites and the throughput benchmark.

mod bench;
mod commands;
mod config;
mod gradcheck;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use bench::{run_bench, BenchReport};
pub use commands::{cmd_bench, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_orthocheck, cmd_train, EvalStream};
pub use config::RunConfig;
pub use gradcheck::{
    default_cases, faulty_case, gradcheck_network, probe, run_gradcheck, GradCase, GradRow, GradcheckReport,
    GRADCHECK_TOLERANCE,
};

use crate::data::GradientTime;
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "off", version, about = "Optical-flow guided features on synthetic motion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the eight-direction moving-blob dataset.
    GenData(GenDataArgs),
    /// Runs one training stage from a config file.
    Train(TrainArgs),
    /// Reports top-1 accuracy of each stream.
    Eval(EvalArgs),
    /// Compares every backward rule with central differences.
    Gradcheck(GradcheckArgs),
    /// Checks that the OFF layer response is orthogonal to the true motion.
    Orthocheck(OrthocheckArgs),
    /// Forward-only frames per second with and without the OFF stream.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub clips_per_class: usize,
    #[arg(long)]
    pub frames: usize,
    #[arg(long)]
    pub size: usize,
    #[arg(long)]
    pub seed: u64,
    /// Pixels per frame.
    #[arg(long, default_value_t = 1.0)]
    pub speed: f64,
    /// Gaussian blob width in pixels.
    #[arg(long, default_value_t = 3.0)]
    pub sigma: f64,
    /// Replace the dataset files of a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    #[arg(long)]
    pub out: PathBuf,
    /// Stage-one checkpoint, required by stage 2.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required = true)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "rgb,off,fused")]
    pub streams: Vec<EvalStream>,
    #[arg(long, default_value_t = 5)]
    pub beta: usize,
    /// Also write the report as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Adds a case with a wrong backward rule; the run must then fail.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct OrthocheckArgs {
    #[arg(long, value_delimiter = ',', default_value = "3,4,6")]
    pub sigma: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,1.5,2")]
    pub speed: Vec<f64>,
    /// Frame at which the spatial gradient is taken: leading|midpoint.
    #[arg(long, default_value = "midpoint")]
    pub at: GradientTime,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Checkpoint with OFF parameters; the default network otherwise.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    #[arg(long, default_value_t = 5)]
    pub repeat: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Runs one command, writing its report to `out`. `Ok(false)` means a
/// verification command ran but found a failure.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<bool> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Orthocheck(a) => cmd_orthocheck(a, out),
        Command::Bench(a) => cmd_bench(a, out),
    }
}
