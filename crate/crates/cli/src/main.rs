mod commands;
mod exit;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

/// Integer-only quantized inference and mixed-precision planning.
#[derive(Debug, Parser)]
#[command(name = "dyq", version)]
pub struct Cli {
    /// Seed for every stochastic step; the DYQ_SEED environment variable overrides it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Track per-site activation ranges over a directory of input batches.
    Calibrate(CalibrateArgs),
    /// Fold batch-norm, quantize weights and activations, write a manifest.
    Quantize(QuantizeArgs),
    /// Run a quantized manifest on an input tensor.
    Infer(InferArgs),
    /// Per-site normalized difference between simulated and integer-only inference.
    Diverge(DivergeArgs),
    /// Choose per-layer bit-widths under size / BOPS / latency limits.
    Allocate(AllocateArgs),
    /// Cost tables, sensitivities, constraint sweeps and reference models.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of input batches (.dyqt), read in file-name order.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = dyq::quantizer::DEFAULT_MOMENTUM)]
    pub momentum: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Model file; an architecture without parameters only gets a size report.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Uniform weight bit-width.
    #[arg(long, conflicts_with = "config", default_value_t = 8)]
    pub bits: u32,
    /// Per-layer bit-widths from `allocate`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Do not keep the first and last layers at 8 bits under --bits.
    #[arg(long)]
    pub no_pin: bool,
    /// Output directory for the manifest and packed weights.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "model")]
    pub stem: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    True,
    Fake,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::True)]
    pub mode: Mode,
    /// Where to write the dequantized output tensor.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct DivergeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TraceNorm {
    Raw,
    PerParameter,
}

/// Where layer sensitivities come from.
#[derive(Debug, Args)]
pub struct SensitivitySource {
    /// Architecture file; taken from --model when absent.
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// Float model, needed with --traces or --estimate.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Precomputed Ω table `{layer: {bits: omega}}`.
    #[arg(long, conflicts_with_all = ["traces", "estimate"])]
    pub sensitivity: Option<PathBuf>,
    /// Hessian traces `{layer: trace}`.
    #[arg(long, conflicts_with = "estimate")]
    pub traces: Option<PathBuf>,
    /// Estimate traces with Hutchinson sampling over --data.
    #[arg(long, requires = "data")]
    pub estimate: bool,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, value_enum, default_value_t = TraceNorm::Raw)]
    pub trace_norm: TraceNorm,
}

/// Bit options, latency table and resource limits.
#[derive(Debug, Args)]
pub struct Limits {
    #[arg(long, value_delimiter = ',', default_value = "4,8")]
    pub bits: Vec<u32>,
    /// `layer,bits,ms` latency table.
    #[arg(long)]
    pub latency: Option<PathBuf>,
    /// Model size limit in MB (2^20 bytes).
    #[arg(long)]
    pub size_limit: Option<f64>,
    /// BOPS limit in G (1e9).
    #[arg(long)]
    pub bops_limit: Option<f64>,
    /// Latency limit in milliseconds.
    #[arg(long)]
    pub latency_limit: Option<f64>,
    /// Let the first and last layers take any bit option.
    #[arg(long)]
    pub no_pin: bool,
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    #[command(flatten)]
    pub source: SensitivitySource,
    #[command(flatten)]
    pub limits: Limits,
    /// Solve without any resource limit.
    #[arg(long)]
    pub unconstrained: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    Size,
    Bops,
    Latency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ZooModel {
    Toy,
    Residual16,
    Resnet18,
    Witness,
}

#[derive(Debug, Subcommand)]
pub enum ReportCommand {
    /// Per-layer size / BOPS table and uniform-precision totals.
    Costs {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "4,8")]
        bits: Vec<u32>,
        #[arg(long)]
        latency: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ω table from traces or estimated traces.
    Sensitivity {
        #[command(flatten)]
        source: SensitivitySource,
        #[arg(long, value_delimiter = ',', default_value = "4,8")]
        bits: Vec<u32>,
        /// Also write the traces used.
        #[arg(long)]
        traces_out: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve once per threshold of one resource.
    Pareto {
        #[command(flatten)]
        source: SensitivitySource,
        #[command(flatten)]
        limits: Limits,
        #[arg(long, value_enum)]
        sweep: Sweep,
        /// Thresholds in the swept resource's units (MB, G or ms).
        #[arg(long, value_delimiter = ',', required = true)]
        thresholds: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-layer latency share vs. sensitivity gain CSV.
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// Write a reference model with seeded weights and input batches.
    Zoo {
        #[arg(long, value_enum)]
        name: ZooModel,
        #[arg(long)]
        out: PathBuf,
        /// Calibration batches to generate.
        #[arg(long, default_value_t = 4)]
        batches: usize,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
    },
}

/// `--seed`, unless DYQ_SEED holds a valid seed.
fn effective_seed(flag: u64) -> anyhow::Result<u64> {
    match std::env::var("DYQ_SEED") {
        Ok(v) if !v.trim().is_empty() => {
            v.trim().parse().map_err(|_| exit::CliError::input(format!("DYQ_SEED={v} is not an unsigned integer")))
        }
        _ => Ok(flag),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = effective_seed(cli.seed).and_then(|seed| commands::run(cli.command, seed));
    match result {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_of(&e))
        }
    }
}
