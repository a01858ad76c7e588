use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use defuse_core::detector::DetectSummary;
use defuse_core::facts::FactBase;
use defuse_core::flows::{compact_view, dedupe_flows, enrich_flow};
use defuse_core::ir::{attach_decompiled, ParseMode, PairingReport};
use defuse_core::witness::WitnessDiagnostics;
use defuse_core::*;
use serde::{Deserialize, Serialize};

/// Failures mapped onto exit codes: 2 for unreadable or malformed input,
/// 3 for an unusable adapter, 1 for anything else.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Adapter(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Adapter(_) => 3,
            CliError::Other(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Adapter(m) | CliError::Other(m) => m,
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Other(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn load_model(path: Option<&Path>) -> Result<SourceSinkModel, CliError> {
    match path {
        None => Ok(SourceSinkModel::default_model()),
        Some(p) => SourceSinkModel::load(&read_text(p)?)
            .map_err(|e| CliError::Input(format!("{}: SchemaError: {e}", p.display()))),
    }
}

/// Sidecar next to the module: `<stem>.decompiled.json`.
pub fn default_sidecar(module: &Path) -> PathBuf {
    let stem = module.file_stem().unwrap_or_default().to_string_lossy();
    module.with_file_name(format!("{stem}.decompiled.json"))
}

pub fn load_module(
    path: &Path,
    strict: bool,
    decompiled: Option<&Path>,
) -> Result<(IrModule, Option<PairingReport>), CliError> {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let mut opts = ParseOptions::default().named(stem);
    if strict {
        opts.mode = ParseMode::Strict;
    }
    let module = parse_module(&read_text(path)?, &opts)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let sidecar = match decompiled {
        Some(p) => Some(p.to_path_buf()),
        None => Some(default_sidecar(path)).filter(|p| p.exists()),
    };
    let Some(sidecar) = sidecar else {
        return Ok((module, None));
    };
    let listing: BTreeMap<String, String> = serde_json::from_str(&read_text(&sidecar)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", sidecar.display())))?;
    let (module, pairing) = attach_decompiled(module, &listing);
    Ok((module, Some(pairing)))
}

#[derive(Debug, Clone, Copy)]
pub struct SliceOptions {
    pub bounds: WitnessBounds,
    pub compact: bool,
    pub dedupe: bool,
}

pub struct Sliced {
    pub facts: FactBase,
    pub graph: PropagationGraph,
    pub witnesses: usize,
    pub diagnostics: WitnessDiagnostics,
    pub flows: Vec<FlowObject>,
    pub flows_raw: usize,
    pub timings: Timings,
}

/// Wall-clock milliseconds per stage, in stage order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings(pub Vec<(String, f64)>);

impl Timings {
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.0.push((stage.to_string(), t.elapsed().as_secs_f64() * 1e3));
        out
    }
}

pub fn slice(module: &IrModule, model: &SourceSinkModel, opts: &SliceOptions) -> Sliced {
    let mut timings = Timings::default();
    let facts = timings.time("facts", || extract_facts(module, model));
    let graph = timings.time("graph", || build_graph(&facts));
    let search = timings.time("witnesses", || find_witnesses(&graph, &facts, &opts.bounds));
    let flows = timings.time("flows", || {
        build_flows(&search.witnesses, &facts)
            .iter()
            .map(|f| {
                let e = enrich_flow(f, &facts, &graph, &opts.bounds);
                if opts.compact {
                    compact_view(&e)
                } else {
                    e
                }
            })
            .collect::<Vec<_>>()
    });
    let flows_raw = flows.len();
    let flows = if opts.dedupe { dedupe_flows(flows).flows } else { flows };
    Sliced {
        witnesses: search.witnesses.len(),
        diagnostics: search.diagnostics,
        facts,
        graph,
        flows,
        flows_raw,
        timings,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub functions: usize,
    pub facts: usize,
    pub edges: BTreeMap<EdgeKind, usize>,
    pub witnesses: usize,
    pub flows_raw: usize,
    pub flows_deduped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<DetectSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub witness: WitnessDiagnostics,
    pub opaque_instructions: usize,
    pub unresolved_calls: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decompiled_pairing: Option<PairingReport>,
}

/// Per-module run summary. Candidate counts appear once detection ran;
/// timings only when asked for, since they differ between runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub module: String,
    pub counts: Counts,
    pub diagnostics: Diagnostics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<Timings>,
}

pub const RUN_REPORT_SCHEMA: &str = "defuse-run/1";

pub fn fact_count(f: &FactBase) -> usize {
    let local: usize = f
        .per_function
        .values()
        .map(|ff| {
            ff.value_flows.len()
                + ff.cell_stores.len()
                + ff.cell_loads.len()
                + ff.load_store_links.len()
                + ff.pointer_ops.len()
                + ff.arg_aliases.len()
                + ff.returns.len()
        })
        .sum();
    local + f.call_facts.len() + f.global_summaries.len() + f.source_hits.len() + f.sink_hits.len()
}

pub fn run_report(module: &IrModule, s: &Sliced, pairing: Option<PairingReport>, timings: Option<Timings>) -> RunReport {
    RunReport {
        schema: RUN_REPORT_SCHEMA.into(),
        module: module.name.clone(),
        counts: Counts {
            functions: module.defined_functions().count(),
            facts: fact_count(&s.facts),
            edges: s.graph.count_by_kind(),
            witnesses: s.witnesses,
            flows_raw: s.flows_raw,
            flows_deduped: s.flows.len(),
            candidates: None,
        },
        diagnostics: Diagnostics {
            witness: s.diagnostics.clone(),
            opaque_instructions: s.facts.diagnostics.opaque_instructions.len(),
            unresolved_calls: s.facts.diagnostics.unresolved_calls.len(),
            decompiled_pairing: pairing,
        },
        timings_ms: timings,
    }
}

pub fn to_pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}
