//! Command-line front end for checkpoint composition and its supporting
//! pipeline: delta analysis across specialist checkpoints, layer-window
//! swapping and sweeps, language-fidelity scoring, corpus filtering, profile
//! training, and text chunking.
//!
//! Results go to stdout or to files named by flags; warnings go to stderr as
//! plain lines. Every failure leaves one machine-readable JSON object on
//! stderr and a stable exit code: 2 usage, 3 io, 4 format, 5 incompatible,
//! 6 degenerate.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use layerswap_core::config::{ConfigError, RunConfig};
use layerswap_core::delta::DeltaError;
use layerswap_core::filter::FilterError;
use layerswap_core::lid::LidError;
use layerswap_core::store::StoreError;
use layerswap_core::surgery::SurgeryError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

// ─────────────────────────────────────────────────────────────────────────
// Errors and exit codes
// ─────────────────────────────────────────────────────────────────────────

/// Closed set of failure classes. The exit code and the `kind` string in
/// the error object are stable; scripts may match on either.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad parameters, or unmet preconditions.
    Usage(String),
    /// The filesystem failed (missing file, permission, short read).
    Io(String),
    /// A file exists but its contents are malformed.
    Format(String),
    /// Two checkpoints cannot be combined.
    Incompatible(String),
    /// The analysis is undefined on this input (no fine-tuning signal or a
    /// numeric breakdown).
    Degenerate(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io(_) => "io",
            CliError::Format(_) => "format",
            CliError::Incompatible(_) => "incompatible",
            CliError::Degenerate(_) => "degenerate",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Format(_) => 4,
            CliError::Incompatible(_) => 5,
            CliError::Degenerate(_) => 6,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m)
            | CliError::Io(m)
            | CliError::Format(m)
            | CliError::Incompatible(m)
            | CliError::Degenerate(m) => m,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> CliError {
        match e {
            StoreError::Io { .. } => CliError::Io(e.to_string()),
            StoreError::BadLayerPattern { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Format(e.to_string()),
        }
    }
}

impl From<DeltaError> for CliError {
    fn from(e: DeltaError) -> CliError {
        match e {
            DeltaError::Store(inner) => inner.into(),
            DeltaError::NotEnoughSpecialists { .. }
            | DeltaError::DuplicateLabel { .. }
            | DeltaError::EmptyGroup { .. } => CliError::Usage(e.to_string()),
            DeltaError::MismatchedTensor { .. } => CliError::Incompatible(e.to_string()),
            DeltaError::Degenerate { .. } | DeltaError::NumericalBreakdown { .. } => {
                CliError::Degenerate(e.to_string())
            }
        }
    }
}

impl From<SurgeryError> for CliError {
    fn from(e: SurgeryError) -> CliError {
        match e {
            SurgeryError::Store(inner) => inner.into(),
            SurgeryError::Incompatible { .. } => CliError::Incompatible(e.to_string()),
            SurgeryError::WindowOutOfRange { .. } | SurgeryError::BadSweep { .. } => {
                CliError::Usage(e.to_string())
            }
        }
    }
}

impl From<LidError> for CliError {
    fn from(e: LidError) -> CliError {
        match e {
            LidError::Io(_) => CliError::Io(e.to_string()),
            LidError::BadTrace { .. } | LidError::BadProfileStore { .. } => {
                CliError::Format(e.to_string())
            }
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<FilterError> for CliError {
    fn from(e: FilterError) -> CliError {
        match e {
            FilterError::Io(_) => CliError::Io(e.to_string()),
            FilterError::BadRecord { .. } | FilterError::DuplicateId { .. } => {
                CliError::Format(e.to_string())
            }
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> CliError {
        match e {
            ConfigError::Parse(_) => CliError::Format(e.to_string()),
            ConfigError::Invalid { .. } => CliError::Usage(e.to_string()),
        }
    }
}

/// Attach the path to a raw I/O error (module errors carry their own).
pub fn io_at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

// ─────────────────────────────────────────────────────────────────────────
// Argument grammar
// ─────────────────────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(name = "layerswap", version = VERSION, about = "Checkpoint layer composition toolkit")]
struct Cli {
    /// JSON run configuration; absent fields take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Size of the rayon thread pool (default: one thread per core).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Print the resolved plan as JSON and write nothing.
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer delta alignment and spectrum across specialist checkpoints.
    Analyze(AnalyzeArgs),
    /// Replace a window of layers in one checkpoint with another's.
    Swap(SwapArgs),
    /// Enumerate (and optionally execute) a series of swap windows.
    Sweep(SweepArgs),
    /// Score traces against language profiles.
    Fidelity(FidelityArgs),
    /// Drop degenerate pairs from a translated corpus.
    Filter(FilterArgs),
    /// Train language profiles from line-per-document corpora.
    TrainProfiles(TrainProfilesArgs),
    /// Split text into budget-sized chunks along natural boundaries.
    Chunk(ChunkArgs),
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// The common ancestor checkpoint.
    #[arg(long, value_name = "FILE")]
    base: PathBuf,
    /// A specialist as label=path; give at least two.
    #[arg(long = "specialist", value_name = "LABEL=FILE")]
    specialists: Vec<String>,
    /// Where to write the JSON report (default: stdout).
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Also write a per-layer CSV (layer,c_bar,s,norm_mean,norm_std).
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct SwapArgs {
    /// Checkpoint providing everything outside the window.
    #[arg(long, value_name = "FILE")]
    target: PathBuf,
    /// Checkpoint providing the layers inside the window.
    #[arg(long, value_name = "FILE")]
    source: PathBuf,
    /// Inclusive layer window as start:end.
    #[arg(long, value_name = "A:B", conflicts_with = "plan")]
    window: Option<String>,
    /// Execute every entry of a sweep plan file instead of one window.
    #[arg(long, value_name = "FILE")]
    plan: Option<PathBuf>,
    /// Output path (window mode).
    #[arg(long, value_name = "FILE", conflicts_with = "out_dir")]
    out: Option<PathBuf>,
    /// Output directory (plan mode; files take the plan's names).
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Label recorded for the target (default: its file stem).
    #[arg(long, value_name = "LABEL")]
    target_label: Option<String>,
    /// Label recorded for the source (default: its file stem).
    #[arg(long, value_name = "LABEL")]
    source_label: Option<String>,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Target checkpoint; optional when --layers is given and windows are
    /// only planned.
    #[arg(long, value_name = "FILE")]
    target: Option<PathBuf>,
    /// Source checkpoint (required to execute).
    #[arg(long, value_name = "FILE")]
    source: Option<PathBuf>,
    /// Layer count for planning without a checkpoint.
    #[arg(long, value_name = "N")]
    layers: Option<usize>,
    /// Window width in layers.
    #[arg(long, value_name = "N")]
    width: usize,
    /// Distance between window starts; the final window is clamped to end
    /// on the last layer.
    #[arg(long, value_name = "N", conflicts_with = "starts")]
    stride: Option<usize>,
    /// Explicit comma-separated window starts.
    #[arg(long, value_name = "A,B,C")]
    starts: Option<String>,
    /// Where executed swaps are written.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Also write the plan list as JSON.
    #[arg(long, value_name = "FILE")]
    plan_out: Option<PathBuf>,
    #[arg(long, value_name = "LABEL")]
    target_label: Option<String>,
    #[arg(long, value_name = "LABEL")]
    source_label: Option<String>,
}

#[derive(Args)]
pub struct FidelityArgs {
    /// JSON-lines of {"text": …}, one trace per line.
    #[arg(long, value_name = "FILE")]
    traces: PathBuf,
    /// Language code whose share is reported.
    #[arg(long, value_name = "LABEL")]
    target: String,
    /// Profile store produced by train-profiles.
    #[arg(long, value_name = "FILE")]
    profiles: PathBuf,
    /// Classify only the first N characters of each trace.
    #[arg(long, value_name = "N")]
    prefix_chars: Option<usize>,
    /// Where to write the JSON report (default: stdout).
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Args)]
pub struct FilterArgs {
    /// JSON-lines of {"source": sample, "translated": sample}.
    #[arg(long, value_name = "FILE")]
    pairs: PathBuf,
    /// Where the per-pair verdicts go, as JSON lines.
    #[arg(long, value_name = "FILE")]
    report: PathBuf,
    /// Optional summary report (JSON, embeds config and input hashes).
    #[arg(long, value_name = "FILE")]
    summary: Option<PathBuf>,
    /// Anomaly threshold in standard deviations (default from config).
    #[arg(long, value_name = "K")]
    k_sigma: Option<f64>,
    /// Context cap in tokens (default from config).
    #[arg(long, value_name = "N")]
    max_tokens: Option<u64>,
    /// Exact token counts: JSON-lines of {"id", "source_tokens",
    /// "translated_tokens"} keyed by translated id.
    #[arg(long, value_name = "FILE")]
    sidecar: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainProfilesArgs {
    /// A corpus as label=path, one document per line; give at least two.
    #[arg(long = "corpus", value_name = "LABEL=FILE")]
    corpora: Vec<String>,
    /// Where the profile store goes.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Profile size K (default from config).
    #[arg(long, value_name = "K")]
    profile_size: Option<usize>,
}

#[derive(Args)]
pub struct ChunkArgs {
    /// Token budget per chunk (default from config).
    #[arg(long, value_name = "N")]
    budget: Option<u64>,
    /// Input file (default: stdin).
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,
    /// Output file for the chunk JSON lines (default: stdout).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

// ─────────────────────────────────────────────────────────────────────────
// Entry
// ─────────────────────────────────────────────────────────────────────────

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".to_string()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }

    let config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io_at(path))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };

    match &cli.command {
        Command::Analyze(args) => commands::analyze(&config, args, cli.dry_run),
        Command::Swap(args) => commands::swap(&config, args, cli.dry_run),
        Command::Sweep(args) => commands::sweep(&config, args, cli.dry_run),
        Command::Fidelity(args) => commands::fidelity(&config, args, cli.dry_run),
        Command::Filter(args) => commands::filter(&config, args, cli.dry_run),
        Command::TrainProfiles(args) => commands::train_profiles(&config, args, cli.dry_run),
        Command::Chunk(args) => commands::chunk(&config, args, cli.dry_run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let object = serde_json::json!({
                "error": { "code": e.code(), "kind": e.kind(), "message": e.message() }
            });
            eprintln!("{object}");
            ExitCode::from(e.code())
        }
    }
}
