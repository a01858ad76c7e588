mod commands;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use defuse_core::WitnessBounds;

use crate::pipeline::CliError;

#[derive(Parser)]
#[command(name = "defuse", version, about = "Witness-backed taint slicing and step-wise detection over LLVM IR")]
struct Cli {
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract facts, search witnesses and emit flow objects.
    Slice(SliceArgs),
    /// Run the detector over a flows file.
    Detect(DetectArgs),
    /// Dump the propagation graph.
    Graph(GraphArgs),
    /// Compare call-graph contexts with slicer flows on ground truth.
    Baseline(BaselineArgs),
    /// Slice and detect every module of a corpus and score against truth.
    Report(ReportArgs),
    /// Line-oriented echo reasoner used to exercise the adapter protocol.
    #[command(hide = true)]
    AdapterEcho,
}

#[derive(Args, Clone)]
pub struct InputArgs {
    /// Source/sink model (TOML); the shipped model when omitted.
    #[arg(long, env = "DEFUSE_MODEL")]
    pub model: Option<PathBuf>,
    /// Reject instructions outside the supported subset.
    #[arg(long, conflicts_with = "tolerant")]
    pub strict: bool,
    /// Keep unsupported instructions as opaque (default).
    #[arg(long)]
    pub tolerant: bool,
    /// Decompiled-text sidecar; `<stem>.decompiled.json` is used if present.
    #[arg(long)]
    pub decompiled: Option<PathBuf>,
}

#[derive(Args, Clone, Copy)]
pub struct BoundArgs {
    #[arg(long, default_value_t = WitnessBounds::default().max_path_edges)]
    pub max_path_edges: usize,
    #[arg(long, default_value_t = WitnessBounds::default().max_local_expansion_steps)]
    pub max_local_steps: usize,
    #[arg(long, default_value_t = WitnessBounds::default().max_witnesses_per_pair)]
    pub max_witnesses_per_pair: usize,
    #[arg(long, default_value_t = WitnessBounds::default().max_global_fanout)]
    pub max_global_fanout: usize,
}

impl BoundArgs {
    pub fn bounds(&self) -> Result<WitnessBounds, CliError> {
        let b = WitnessBounds {
            max_path_edges: self.max_path_edges,
            max_local_expansion_steps: self.max_local_steps,
            max_witnesses_per_pair: self.max_witnesses_per_pair,
            max_global_fanout: self.max_global_fanout,
        };
        b.validate().map_err(|e| CliError::Input(e.to_string()))?;
        Ok(b)
    }
}

#[derive(Args)]
pub struct SliceArgs {
    pub module: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub bounds: BoundArgs,
    /// Emit witness frames only, without helper frames.
    #[arg(long)]
    pub compact: bool,
    /// Keep flows whose key sequences repeat.
    #[arg(long)]
    pub no_dedupe: bool,
    /// Flows file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run report destination.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Include per-stage wall-clock times in the run report.
    #[arg(long)]
    pub timings: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReasonerKind {
    Reference,
    Adapter,
}

#[derive(Args)]
pub struct DetectArgs {
    pub flows: PathBuf,
    #[arg(long)]
    pub module: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value = "reference")]
    pub reasoner: ReasonerKind,
    /// Adapter program and arguments, whitespace separated.
    #[arg(long, required_if_eq("reasoner", "adapter"))]
    pub adapter_cmd: Option<String>,
    /// Reports file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GraphArgs {
    pub module: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BaselineArgs {
    /// Directory holding the modules and `truth.json`.
    pub corpus: PathBuf,
    /// Ground-truth file; `<corpus>/truth.json` when omitted.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Hop counts for the call-graph contexts.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2])]
    pub k: Vec<usize>,
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub bounds: BoundArgs,
    /// JSON table destination; the text table always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ReportArgs {
    pub corpus: PathBuf,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub bounds: BoundArgs,
    #[arg(long)]
    pub compact: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = || match cli.command {
        Command::Slice(a) => commands::slice(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::Graph(a) => commands::graph(&a),
        Command::Baseline(a) => commands::baseline(&a),
        Command::Report(a) => commands::report(&a),
        Command::AdapterEcho => commands::adapter_echo(),
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(run),
            Err(e) => Err(CliError::Other(e.to_string())),
        },
        None => run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("defuse: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
