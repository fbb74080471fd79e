mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stacked_latency::campaign::SurfaceDataset;
use stacked_latency::estimate::Family;
use stacked_latency::generator::StatRecords;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "stacked-latency", version, about = "Benchmark, fit and estimate neural-network layer latencies")]
struct Cli {
    /// Omit wall-clock timestamps from written documents.
    #[arg(long, global = true)]
    no_timestamps: bool,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run benchmark sweeps against a device and write records and samples.
    Bench(BenchArgs),
    /// Fit a platform model from benchmark records.
    Fit(FitArgs),
    /// Estimate the latency of one network.
    Estimate(EstimateArgs),
    /// Compare all model families against a device on a set of networks.
    Evaluate(EvaluateArgs),
    /// Write an oracle device specification.
    OracleMake(OracleMakeArgs),
    /// Write a synthetic network document.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct DeviceArgs {
    /// Oracle specification file, or a preset name (default, noisy, add-fusion, ideal).
    #[arg(long, default_value = "default")]
    oracle: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Measurements averaged per layer.
    #[arg(long, default_value_t = 20)]
    iters: u32,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    device: DeviceArgs,
    /// Output directory for records.csv, samples.csv and bench.json.
    #[arg(long)]
    out: PathBuf,
    /// Run a single sweep document instead of the standard campaign.
    #[arg(long)]
    sweep: Option<PathBuf>,
    /// Model whose array dimensions place efficiency-surface sweeps.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Sweeps feeding the statistical model.
    #[arg(long, value_enum, default_value = "surface")]
    dataset: DatasetArg,
    /// Configurations of the efficiency-surface sweep.
    #[arg(long, default_value_t = 1500)]
    surface_configs: usize,
    /// Configurations per micro-kernel sweep.
    #[arg(long, default_value_t = 80)]
    micro_configs: usize,
    /// Configurations per fusion template sweep.
    #[arg(long, default_value_t = 500)]
    fusion_configs: usize,
    /// Bytes per tensor element.
    #[arg(long, default_value_t = 1)]
    byte_width: u32,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum DatasetArg {
    Surface,
    Noisy,
    Union,
}

impl From<DatasetArg> for SurfaceDataset {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Surface => SurfaceDataset::Surface,
            DatasetArg::Noisy => SurfaceDataset::Noisy,
            DatasetArg::Union => SurfaceDataset::Union,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum StatArg {
    Aligned,
    All,
}

impl From<StatArg> for StatRecords {
    fn from(s: StatArg) -> Self {
        match s {
            StatArg::Aligned => StatRecords::Aligned,
            StatArg::All => StatRecords::All,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum FamilyArg {
    Roofline,
    Refined,
    Statistical,
    Mixed,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Roofline => Family::Roofline,
            FamilyArg::Refined => Family::Refined,
            FamilyArg::Statistical => Family::Statistical,
            FamilyArg::Mixed => Family::Mixed,
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Layer records written by `bench`.
    #[arg(long)]
    records: PathBuf,
    /// Fusion samples written by `bench`.
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Device name stored in the model metadata.
    #[arg(long, default_value = "unknown")]
    device: String,
    /// Records that train the statistical model.
    #[arg(long, value_enum, default_value = "aligned")]
    stat_records: StatArg,
    /// Seed of the statistical model.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bytes per tensor element.
    #[arg(long, default_value_t = 1)]
    byte_width: u32,
    /// Also write the fit summary to this file.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, value_enum, default_value = "mixed")]
    family: FamilyArg,
    /// Write the report document here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the per-layer table.
    #[arg(long)]
    table: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    device: DeviceArgs,
    #[arg(long)]
    model: PathBuf,
    /// Network documents; may be repeated.
    #[arg(long)]
    graph: Vec<PathBuf>,
    /// Add this many random synthetic networks.
    #[arg(long, default_value_t = 0)]
    synthetic: usize,
    /// Seed of the synthetic networks.
    #[arg(long, default_value_t = 1000)]
    synthetic_seed: u64,
    /// Add the cell-based architecture family.
    #[arg(long)]
    nas: bool,
    /// Families to compare; all four when omitted.
    #[arg(long, value_enum)]
    family: Vec<FamilyArg>,
    /// Write the full result document here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-network and per-layer plot data here.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleMakeArgs {
    #[arg(long, default_value = "default")]
    preset: String,
    /// Relative measurement noise.
    #[arg(long)]
    noise: Option<f64>,
    /// Array dimensions, comma separated.
    #[arg(long, value_delimiter = ',')]
    s: Vec<u32>,
    /// Unrolling efficiency coefficients, comma separated.
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Emit member `N` of the architecture family instead of a random network.
    #[arg(long)]
    nas: Option<usize>,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stamp = !cli.no_timestamps;
    match cli.command {
        Command::Bench(a) => commands::bench(a, stamp),
        Command::Fit(a) => commands::fit(a, stamp),
        Command::Estimate(a) => commands::estimate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::OracleMake(a) => commands::oracle_make(a),
        Command::Synth(a) => commands::synth(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
