//! `fluxfno` command-line driver.
//!
//! Exit status is 0 on success, 1 when a run fails (I/O, blow-up,
//! divergence) and 2 for bad arguments or configuration.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fluxfno::{Equation, Integrator};

use crate::config::Suite;

/// Marks an error as a usage or configuration problem (exit status 2).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug, Parser)]
#[command(
    name = "fluxfno",
    version,
    about = "Finite-volume schemes with a learned Fourier neural operator flux"
)]
struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset of GRF-initialised trajectories.
    GenData(GenDataArgs),
    /// Train a learned flux on a dataset.
    Train(TrainArgs),
    /// Roll out a flux from one initial condition.
    Infer(InferArgs),
    /// Evaluate a flux on test, out-of-distribution or resolution suites.
    Eval(EvalArgs),
    /// Print the capacity of a trained model.
    Capacity(CapacityArgs),
    /// Write per-time CSV files and an optional SVG chart of a rollout.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_equation)]
    pub equation: Option<Equation>,
    #[arg(long)]
    pub n_funcs: Option<usize>,
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub t_end: Option<f64>,
    #[arg(long)]
    pub n_steps: Option<usize>,
    /// Correlation length of the GRF covariance.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub advection_speed: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV; defaults to the model path with `.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub kmax: Option<usize>,
    /// Suppress per-epoch progress on standard error.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Euler,
    Rk2,
}

impl From<SchemeArg> for Integrator {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Euler => Integrator::Euler,
            SchemeArg::Rk2 => Integrator::SspRk2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyticArg {
    Upwind,
    Lax,
    Godunov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    File,
    Grf,
    Step,
    Pulse,
}

/// Where the flux comes from: a trained model or a classical formula.
#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct FluxSource {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub analytic: Option<AnalyticArg>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub flux: FluxSource,
    #[arg(long, value_enum, default_value = "grf")]
    pub init: InitArg,
    /// Dataset holding the initial state for `--init file`.
    #[arg(long)]
    pub init_file: Option<PathBuf>,
    /// Trajectory index within `--init-file`.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, value_parser = parse_equation)]
    pub equation: Option<Equation>,
    #[arg(long)]
    pub advection_speed: Option<f64>,
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub t_end: f64,
    /// Fixed step size; defaults to the model's Courant number, or half a cell for analytic fluxes.
    #[arg(long, conflicts_with = "courant")]
    pub dt: Option<f64>,
    /// Choose each step from the CFL condition with this Courant number.
    #[arg(long)]
    pub courant: Option<f64>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub flux: FluxSource,
    /// Test dataset, needed by the `test` suite.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub times: Option<Vec<f64>>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub suite: Option<Vec<Suite>>,
    #[arg(long, value_parser = parse_equation)]
    pub equation: Option<Equation>,
    #[arg(long)]
    pub advection_speed: Option<f64>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Step size for the out-of-distribution suite.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Grid for the out-of-distribution suite.
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long)]
    pub grf_scale: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub resolutions: Option<Vec<usize>>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON report; a plain-text table is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CapacityArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
    #[arg(long, default_value_t = 2.0)]
    pub q: f64,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Rollout file written by `infer`.
    #[arg(long)]
    pub traj: PathBuf,
    /// Reference trajectory; computed from the initial state when absent.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    pub times: Vec<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `plot.svg`.
    #[arg(long)]
    pub svg: bool,
}

fn parse_equation(s: &str) -> Result<Equation, String> {
    s.parse::<Equation>().map_err(|e| e.to_string())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<fluxfno::Error>() {
            return match e {
                fluxfno::Error::InvalidArgument(_)
                | fluxfno::Error::StencilTooWide { .. }
                | fluxfno::Error::Shape(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Capacity(a) => commands::capacity(a),
        Command::Plot(a) => plot::plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
