//! Command-line front end: quantize, infer, eval, compare, bench and a
//! generator for synthetic models and datasets.
//!
//! Every command returns a report value whose `Display` form is what the
//! binary prints, so the same code paths are exercised from tests.

pub mod bench;
pub mod commands;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use capsnet_core::kernels::ConvPartition;

pub use bench::{cmd_bench, BenchKernel, BenchReport, BenchRow, BenchStrategy, BENCH_CSV_HEADER};
pub use commands::{
    cmd_compare, cmd_eval, cmd_generate, cmd_infer, cmd_quantize, CompareReport, EvalReport, GenerateReport,
    InferReport, QuantizeReport,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] capsnet_core::Error),
}

impl CliError {
    /// 1 for usage errors, 2 for data and format errors, 3 for internal
    /// invariant violations.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(capsnet_core::Error::Invariant(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "capsnet", version, about = "Int-8 capsule network inference engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a float model using a calibration dataset.
    Quantize(QuantizeArgs),
    /// Classify one sample with a quantized model.
    Infer(InferArgs),
    /// Accuracy of a quantized model on a labelled dataset.
    Eval(EvalArgs),
    /// Compare a float model against its quantized counterpart.
    Compare(CompareArgs),
    /// Time a kernel and report throughput with a result checksum.
    Bench(bench::BenchArgs),
    /// Write a random float model or a synthetic dataset.
    #[command(subcommand)]
    Generate(GenerateCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartitionArg {
    Height,
    Channel,
}

impl From<PartitionArg> for ConvPartition {
    fn from(p: PartitionArg) -> Self {
        match p {
            PartitionArg::Height => ConvPartition::Height,
            PartitionArg::Channel => ConvPartition::Channel,
        }
    }
}

/// Execution flags shared by the commands that run the int-8 network.
#[derive(Debug, Clone, Args)]
pub struct ExecArgs {
    /// naive, transposed-b or packed-dot.
    #[arg(long, default_value = "packed-dot")]
    pub strategy: String,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, value_enum, default_value = "height")]
    pub conv_partition: PartitionArg,
}

#[derive(Debug, Clone, Args)]
pub struct QuantizeArgs {
    /// Float model manifest.
    #[arg(long)]
    pub model: PathBuf,
    /// Float weight blob.
    #[arg(long)]
    pub weights: PathBuf,
    /// Calibration dataset.
    #[arg(long)]
    pub calib: PathBuf,
    /// Output prefix; writes PREFIX.q7.json and PREFIX.q7.bin.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub qmodel: PathBuf,
    /// Quantized blob; defaults to the manifest path with a .bin extension.
    #[arg(long)]
    pub qweights: Option<PathBuf>,
    /// Dataset holding the sample.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[command(flatten)]
    pub exec: ExecArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub qmodel: PathBuf,
    #[arg(long)]
    pub qweights: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub exec: ExecArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// Float model manifest.
    #[arg(long)]
    pub fmodel: PathBuf,
    /// Float weight blob.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub qmodel: PathBuf,
    #[arg(long)]
    pub qweights: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub exec: ExecArgs,
}

#[derive(Debug, Clone, Subcommand)]
pub enum GenerateCommand {
    /// Float model with weights drawn from N(0, std^2); std 0 gives an all-zero model.
    Model(GenerateModelArgs),
    /// Samples drawn uniformly from [0, 1) with random labels.
    Dataset(GenerateDatasetArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenerateModelArgs {
    /// mnist, smallnorb or cifar10.
    #[arg(long)]
    pub arch: String,
    #[arg(long, default_value_t = 0.1)]
    pub std: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Writes PREFIX.json and PREFIX.bin.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateDatasetArgs {
    /// Sample shape HxWxC.
    #[arg(long)]
    pub shape: String,
    #[arg(long)]
    pub count: u32,
    #[arg(long, default_value_t = 10)]
    pub classes: u8,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Store samples as int-8 Q0.7 instead of f32.
    #[arg(long)]
    pub int8: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `AxBxC...` into exactly `n` positive dimensions.
pub fn parse_dims(s: &str, n: usize) -> CliResult<Vec<usize>> {
    let dims: Vec<usize> = s
        .split(['x', 'X'])
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad dimensions {s:?}")))?;
    if dims.len() != n || dims.contains(&0) {
        return Err(CliError::Usage(format!("expected {n} positive dimensions, got {s:?}")));
    }
    Ok(dims)
}

/// Runs a parsed command and returns the text to print.
pub fn run(cli: Cli) -> CliResult<String> {
    Ok(match cli.command {
        Command::Quantize(a) => cmd_quantize(&a)?.to_string(),
        Command::Infer(a) => cmd_infer(&a)?.to_string(),
        Command::Eval(a) => cmd_eval(&a)?.to_string(),
        Command::Compare(a) => cmd_compare(&a)?.to_string(),
        Command::Bench(a) => cmd_bench(&a)?.to_string(),
        Command::Generate(g) => cmd_generate(&g)?.to_string(),
    })
}

/// Entry point used by the binary.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
