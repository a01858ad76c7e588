//! Step-wise detection over flow objects.
//!
//! Each frame's view is handed to a [`Reasoner`] together with the state left
//! by the previous frame. States are cached in a [`PrefixTrie`] under the
//! frame-key prefix that produced them, so flows sharing a prefix resume from
//! the deepest cached state. The final state is checked by [`verify_path`].

mod adapter;
mod interval;
mod reference;
mod state;
mod trie;
mod verify;
mod view;

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::flows::{AnchorCues, FlowObject};
use crate::ir::{FunctionId, IrModule};
use crate::json::{read_document, write_document, DocumentError};

pub use adapter::{echo_step, AdapterReasoner};
pub use interval::Interval;
pub use reference::ReferenceReasoner;
pub use state::{dismissal, qualify, AccessRecord, ObjectBounds, ReasoningState, ViolationKind};
pub use trie::{PrefixTrie, TrieCounters};
pub use verify::{dedup_violations, root_marker, verify_path, Violation};
pub use view::{select_view, FunctionView};

pub const REPORTS_SCHEMA: &str = "defuse-reports/1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ReasonerFailure(pub String);

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("unknown function '{0}'")]
    UnknownFunction(FunctionId),
    #[error("flow {flow_id}: reasoner failed: {source}")]
    Reasoner { flow_id: String, source: ReasonerFailure },
    #[error("flow {flow_id}: state contract broken at '{function}': {message}")]
    StateContractViolation {
        flow_id: String,
        function: FunctionId,
        message: String,
    },
}

/// One state update per frame: `S_n = step(S_{n-1}, view, anchors)`.
pub trait Reasoner: Sync {
    fn step(
        &self,
        state: &ReasoningState,
        view: &FunctionView,
        anchors: &AnchorCues,
    ) -> Result<ReasoningState, ReasonerFailure>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Vulnerable,
    Benign,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    /// Frames covered by the cached prefix this run resumed from.
    pub resumed_depth: usize,
    pub computed_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub flow_id: String,
    pub decision: Decision,
    pub violations: Vec<Violation>,
    pub explanation: Vec<String>,
    pub reasoner_call_count: usize,
    pub cache_stats: CacheStats,
}

impl DetectionReport {
    /// The report with call counts and cache figures zeroed, for comparing
    /// warm and cold runs.
    pub fn without_cache_figures(&self) -> DetectionReport {
        DetectionReport {
            reasoner_call_count: 0,
            cache_stats: CacheStats::default(),
            ..self.clone()
        }
    }
}

/// Applies one reasoner step and checks the state contract: the step index
/// advances by one and every propagation token is tracked or dismissed.
pub fn step_update(
    flow_id: &str,
    reasoner: &dyn Reasoner,
    state: &ReasoningState,
    view: &FunctionView,
    anchors: &AnchorCues,
) -> Result<ReasoningState, DetectError> {
    let next = reasoner.step(state, view, anchors).map_err(|source| DetectError::Reasoner {
        flow_id: flow_id.to_string(),
        source,
    })?;
    let broken = |message: String| DetectError::StateContractViolation {
        flow_id: flow_id.to_string(),
        function: view.function.clone(),
        message,
    };
    if next.step != state.step + 1 {
        return Err(broken(format!("step {} after {}", next.step, state.step)));
    }
    for t in &anchors.propagation_tokens {
        let q = qualify(&view.function, t);
        if !next.acknowledges(&q) {
            return Err(broken(format!("propagation token {q} neither tracked nor dismissed")));
        }
    }
    Ok(next)
}

pub fn analyze_flow(
    flow: &FlowObject,
    module: &IrModule,
    reasoner: &dyn Reasoner,
    trie: &PrefixTrie,
) -> Result<DetectionReport, DetectError> {
    let keys = flow.keys();
    let cached = trie.longest_cached_prefix(&keys);
    let resumed = cached.len();
    let mut state: Arc<ReasoningState> = cached.last().cloned().unwrap_or_default();
    let last = flow.frames.len() - 1;
    for (i, frame) in flow.frames.iter().enumerate().skip(resumed) {
        let view = select_view(&frame.function, module, i == 0 || i == last)?;
        let next = step_update(&flow.id, reasoner, &state, &view, &frame.anchors)?;
        state = trie.insert(&keys[..=i], next);
    }
    let violations = dedup_violations(verify_path(flow, &state));
    let decision = if violations.is_empty() { Decision::Benign } else { Decision::Vulnerable };
    Ok(DetectionReport {
        flow_id: flow.id.clone(),
        decision,
        explanation: explain(flow, &state, &violations),
        violations,
        reasoner_call_count: flow.frames.len() - resumed,
        cache_stats: CacheStats {
            resumed_depth: resumed,
            computed_frames: flow.frames.len() - resumed,
        },
    })
}

fn explain(flow: &FlowObject, state: &ReasoningState, violations: &[Violation]) -> Vec<String> {
    let mut out = vec![format!(
        "flow {} over {} frame(s): {}",
        flow.id,
        flow.frames.len(),
        flow.keys().iter().map(ToString::to_string).collect::<Vec<_>>().join(" -> ")
    )];
    out.push(format!(
        "final state: {} tracked, {} access(es), {} constraint(s)",
        state.tracked_values.len(),
        state.accesses.len(),
        state.constraints.len()
    ));
    for c in &state.constraints {
        out.push(format!("constraint: {c}"));
    }
    for v in violations {
        out.push(format!(
            "{:?} at {}#{} on {}: {}; chain {}",
            v.kind,
            v.sink_function,
            v.sink_instr.0,
            v.accessed_object,
            v.feasibility_note,
            v.taint_chain.join(" -> ")
        ));
    }
    if violations.is_empty() {
        out.push("no tainted access escapes its object".into());
    }
    out
}

/// Analyzes every flow. Flows are grouped by first frame key; groups run in
/// parallel and each group runs in input order, so flows that could share a
/// cached prefix always see the same cache contents. Reports come back in
/// input order.
pub fn detect_flows(
    flows: &[FlowObject],
    module: &IrModule,
    reasoner: &dyn Reasoner,
    trie: &PrefixTrie,
) -> Result<Vec<DetectionReport>, DetectError> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, f) in flows.iter().enumerate() {
        groups.entry(f.frames[0].key().to_string()).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let done: Vec<Vec<(usize, DetectionReport)>> = groups
        .par_iter()
        .map(|g| {
            g.iter()
                .map(|&i| analyze_flow(&flows[i], module, reasoner, trie).map(|r| (i, r)))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let mut out: Vec<(usize, DetectionReport)> = done.into_iter().flatten().collect();
    out.sort_by_key(|(i, _)| *i);
    Ok(out.into_iter().map(|(_, r)| r).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectSummary {
    pub analyzed: usize,
    pub vulnerable: usize,
    pub benign: usize,
    pub reasoner_calls: usize,
}

impl DetectSummary {
    pub fn of(reports: &[DetectionReport]) -> Self {
        let vulnerable = reports.iter().filter(|r| r.decision == Decision::Vulnerable).count();
        DetectSummary {
            analyzed: reports.len(),
            vulnerable,
            benign: reports.len() - vulnerable,
            reasoner_calls: reports.iter().map(|r| r.reasoner_call_count).sum(),
        }
    }
}

pub fn reports_to_json(reports: &[DetectionReport]) -> String {
    let s = DetectSummary::of(reports);
    let header = [
        ("analyzed", s.analyzed.into()),
        ("vulnerable", s.vulnerable.into()),
        ("benign", s.benign.into()),
        ("reasoner_calls", s.reasoner_calls.into()),
    ];
    write_document(REPORTS_SCHEMA, &header, "reports", reports).expect("reports serialize")
}

pub fn reports_from_json(text: &str) -> Result<Vec<DetectionReport>, DocumentError> {
    read_document(text, REPORTS_SCHEMA, "reports").map(|(_, r)| r)
}
