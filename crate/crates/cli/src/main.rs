//! `anda`: command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure (I/O, oracle), 2 usage or
//! validation error, 3 no feasible combination, 4 tile exceeds a buffer.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "anda", version, about = "Grouped variable-length activation format toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert an FP16 `.andt` tensor to an `.anda` container.
    Encode(EncodeArgs),
    /// Convert an `.anda` container back to an FP16 `.andt` tensor.
    Decode(DecodeArgs),
    /// Generate a synthetic calibration layer.
    Gen(GenArgs),
    /// Format error over a grid of group sizes and mantissa lengths.
    Sweep(SweepArgs),
    /// Search a precision combination.
    Search(SearchArgs),
    /// Simulate one platform on a model shape.
    Simulate(SimulateArgs),
    /// Compare all platforms against FP-FP.
    Compare(CompareArgs),
    /// Sweep the accuracy tolerance and report speedup and energy efficiency.
    Tradeoff(TradeoffArgs),
    /// Answer oracle requests on stdin/stdout.
    OracleServe(OracleServeArgs),
    /// Write the built-in architecture and energy configs.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u16).range(1..=64))]
    gs: u16,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=16))]
    m: u8,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Family {
    Opt,
    Llama,
}

impl From<Family> for anda::bops::ModelFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Opt => anda::bops::ModelFamily::Opt,
            Family::Llama => anda::bops::ModelFamily::Llama,
        }
    }
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    d_model: usize,
    /// Defaults to 4 x d_model.
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long, value_enum, default_value_t = Family::Opt)]
    family: Family,
    /// Feed each module's output forward as the next module's activations.
    #[arg(long)]
    chain: bool,
    /// Output directory; receives workload.json and the tensor files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    workload: PathBuf,
    /// Comma list or inclusive range, e.g. `1,16,64` or `8..64`.
    #[arg(long, default_value = "64")]
    gs_list: String,
    #[arg(long, default_value = "4..16")]
    m_list: String,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Calibration workload; required for the proxy oracle.
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Model shape for BOPs; defaults to the workload's layer shape.
    #[arg(long)]
    shape: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long, default_value_t = 32)]
    max_iters: usize,
    /// Ignore the iteration budget and run until the queue empties.
    #[arg(long)]
    exhaustive: bool,
    #[arg(long, default_value_t = 4)]
    init_lo: u8,
    #[arg(long, default_value_t = 13)]
    init_hi: u8,
    #[arg(long, default_value_t = 1)]
    floor: u8,
    /// `proxy`, `exec:<command>`, `files:<request>,<response>`,
    /// `synthetic:min16` or `synthetic:threshold:a,b,c,d`.
    #[arg(long, default_value = "proxy")]
    oracle: String,
    #[arg(long, default_value_t = 60.0)]
    oracle_timeout: f64,
    /// JSON-lines trace, one record per iteration.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Result JSON, accepted by `--comb` of simulate and compare.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CostArgs {
    /// Model shape JSON: {"family","d_model","d_ff","n_layers","weight_bits"}.
    #[arg(long)]
    shape: PathBuf,
    /// Architecture config; falls back to $ANDA_CONFIG_DIR/arch.json, then built-in defaults.
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Energy config; falls back to $ANDA_CONFIG_DIR/energy.json, then built-in defaults.
    #[arg(long)]
    energy: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    tokens: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlatformArg {
    Anda,
    Fpfp,
    Fpint,
    Ifpu,
    Figna,
    FignaM8,
    FignaM11,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    cost: CostArgs,
    /// `m1,m2,m3,m4` or a search result JSON file.
    #[arg(long, default_value = "16,16,16,16")]
    comb: String,
    #[arg(long, value_enum, default_value_t = PlatformArg::Anda)]
    platform: PlatformArg,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    cost: CostArgs,
    /// `m1,m2,m3,m4` or a search result JSON file.
    #[arg(long)]
    comb: String,
    /// Plot-ready JSON series of speedup and energy efficiency.
    #[arg(long)]
    plot_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TradeoffArgs {
    #[command(flatten)]
    cost: CostArgs,
    #[arg(long)]
    workload: Option<PathBuf>,
    #[arg(long, default_value = "proxy")]
    oracle: String,
    #[arg(long, default_value_t = 60.0)]
    oracle_timeout: f64,
    /// Comma list of tolerances.
    #[arg(long, default_value = "0.001,0.005,0.01,0.02,0.05")]
    deltas: String,
    #[arg(long, default_value_t = 32)]
    max_iters: usize,
    #[arg(long)]
    plot_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleServeArgs {
    /// Score with the proxy oracle over this workload.
    #[arg(long, conflicts_with = "synthetic")]
    proxy: Option<PathBuf>,
    /// `min16` or `threshold:a,b,c,d`.
    #[arg(long)]
    synthetic: Option<String>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Directory receiving arch.json and energy.json.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
