//! Context construction compared against ground-truth traces: k-hop
//! call-graph neighbourhoods versus witness-backed flows.

use serde::{Deserialize, Serialize};

use crate::detector::Decision;
use crate::flows::FlowObject;
use crate::graph::{EdgeKind, GraphError, PropagationGraph};
use crate::ir::{FunctionId, InstrId};
use crate::json::{read_document, write_document, DocumentError};

pub const TRUTH_SCHEMA: &str = "defuse-truth/1";
pub const BASELINE_SCHEMA: &str = "defuse-baseline/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SinkId {
    pub function: FunctionId,
    pub instr: InstrId,
}

/// One known flow: the functions it crosses in order, its sink, and the
/// decision a detector should reach.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRecord {
    /// Module file stem.
    pub module: String,
    #[serde(default = "default_entry")]
    pub entry: FunctionId,
    pub functions: Vec<FunctionId>,
    /// Absent when sanitizing removed the sink site's demanded taint.
    #[serde(default)]
    pub sink: Option<SinkId>,
    pub expected: Decision,
}

fn default_entry() -> FunctionId {
    FunctionId::new("main")
}

impl TruthRecord {
    /// Interprocedural traces cross more than one function.
    pub fn is_interprocedural(&self) -> bool {
        self.functions.windows(2).any(|w| w[0] != w[1])
    }
}

pub fn truth_from_json(text: &str) -> Result<Vec<TruthRecord>, DocumentError> {
    read_document(text, TRUTH_SCHEMA, "flaws").map(|(_, r)| r)
}

pub fn truth_to_json(records: &[TruthRecord]) -> String {
    write_document(TRUTH_SCHEMA, &[], "flaws", records).expect("truth records serialize")
}

/// How one context covers one ground-truth trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlawOutcome {
    pub module: String,
    pub context: String,
    pub sink_covered: bool,
    pub flow_covered: bool,
    pub connected: bool,
    pub context_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRow {
    pub context: String,
    pub flaws: usize,
    pub sink_coverage: usize,
    pub flow_coverage: usize,
    pub connectivity: usize,
    pub avg_context_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTable {
    pub rows: Vec<ContextRow>,
    pub outcomes: Vec<FlawOutcome>,
}

fn sink_function(r: &TruthRecord) -> Option<&FunctionId> {
    r.sink.as_ref().map(|s| &s.function).or(r.functions.last())
}

/// Functions reachable from the entry within `k` call edges. Consecutive
/// trace functions are connected when one reaches the other over call edges
/// inside the context; data crossing a global has no such link.
pub fn cg_outcome(record: &TruthRecord, graph: &PropagationGraph, k: usize) -> Result<FlawOutcome, GraphError> {
    let ctx = graph.cg_khop_context(&record.entry, k)?;
    let has = |f: &FunctionId| ctx.contains(f);
    let flow_covered = record.functions.iter().all(has);
    let connected = flow_covered
        && record.functions.windows(2).all(|w| {
            w[0] == w[1] || graph.call_reachable(&w[0], &w[1], &ctx) || graph.call_reachable(&w[1], &w[0], &ctx)
        });
    Ok(FlawOutcome {
        module: record.module.clone(),
        context: format!("CG-{k}"),
        sink_covered: sink_function(record).is_some_and(has),
        flow_covered,
        connected,
        context_size: ctx.len(),
    })
}

fn is_subsequence(needle: &[FunctionId], hay: &[&FunctionId]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| *h == n))
}

/// The slicer's context for a trace is the first flow ending at the trace's
/// sink whose frames contain the trace in order. Consecutive frames are
/// linked by propagation edges, so coverage implies connectivity.
pub fn slicer_outcome(record: &TruthRecord, flows: &[FlowObject]) -> FlawOutcome {
    let at_sink = |f: &&FlowObject| match &record.sink {
        Some(s) => f.witness.sink_hit.function == s.function && f.witness.sink_hit.instr == s.instr,
        None => false,
    };
    let candidates: Vec<&FlowObject> = flows.iter().filter(at_sink).collect();
    let matching = candidates.iter().find(|f| {
        let fns: Vec<&FunctionId> = f.frames.iter().map(|fr| &fr.function).collect();
        is_subsequence(&record.functions, &fns)
    });
    let chosen = matching.or(candidates.first());
    let size = chosen.map_or(0, |f| {
        let mut fns: Vec<&FunctionId> = f.frames.iter().map(|fr| &fr.function).collect();
        fns.sort();
        fns.dedup();
        fns.len()
    });
    let covered = matching.is_some();
    FlawOutcome {
        module: record.module.clone(),
        context: "slicer".into(),
        sink_covered: chosen.is_some(),
        flow_covered: covered,
        connected: covered,
        context_size: size,
    }
}

/// Whether a flow crosses any global edge.
pub fn uses_global_edge(flow: &FlowObject) -> bool {
    flow.witness.edges.iter().any(|e| e.kind() == EdgeKind::Global)
}

pub fn summarize(context: &str, outcomes: &[FlawOutcome]) -> ContextRow {
    let mine: Vec<&FlawOutcome> = outcomes.iter().filter(|o| o.context == context).collect();
    let n = mine.len();
    let total: usize = mine.iter().map(|o| o.context_size).sum();
    ContextRow {
        context: context.to_string(),
        flaws: n,
        sink_coverage: mine.iter().filter(|o| o.sink_covered).count(),
        flow_coverage: mine.iter().filter(|o| o.flow_covered).count(),
        connectivity: mine.iter().filter(|o| o.connected).count(),
        avg_context_size: if n == 0 { 0.0 } else { total as f64 / n as f64 },
    }
}

impl BaselineTable {
    pub fn to_json(&self) -> String {
        let header = [("rows", serde_json::to_value(&self.rows).expect("rows serialize"))];
        write_document(BASELINE_SCHEMA, &header, "outcomes", &self.outcomes).expect("outcomes serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, DocumentError> {
        let (mut header, outcomes) = read_document(text, BASELINE_SCHEMA, "outcomes")?;
        let rows = header.remove("rows").ok_or(DocumentError::Missing("rows"))?;
        Ok(BaselineTable {
            rows: serde_json::from_value(rows)?,
            outcomes,
        })
    }

    /// Fixed-width text rendering, one row per context.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<8} {:>6} {:>9} {:>9} {:>9} {:>9}\n",
            "context", "flaws", "sink_cov", "flow_cov", "connect", "avg_fns"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<8} {:>6} {:>9} {:>9} {:>9} {:>9.2}\n",
                r.context,
                r.flaws,
                format!("{}/{}", r.sink_coverage, r.flaws),
                format!("{}/{}", r.flow_coverage, r.flaws),
                format!("{}/{}", r.connectivity, r.flaws),
                r.avg_context_size
            ));
        }
        out
    }
}
