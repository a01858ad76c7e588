//! Flow objects: witnesses repackaged as ordered, labelled frames for the
//! step-wise detector.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::facts::{Channel, EndpointHit, FactBase, FunctionFacts, SinkFamily};
use crate::graph::{EdgeMeta, PropEdge, PropagationGraph};
use crate::ir::{FunctionId, InstrId};
use crate::json::{read_document, write_document, DocumentError};
use crate::token::{string_serde, Tag, Token};
use crate::witness::{transfer_across_edge, TaintSet, Witness, WitnessBounds};

pub const FLOWS_SCHEMA: &str = "defuse-flows/1";

/// Evidence class of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Witness,
    GlobalProven,
    DefuseProven,
    ContextOnly,
}

/// The source or sink match a flow was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointAnnotation {
    pub rule_name: String,
    pub instr: InstrId,
    pub tokens: Vec<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<Channel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<SinkFamily>,
}

impl From<&EndpointHit> for EndpointAnnotation {
    fn from(h: &EndpointHit) -> Self {
        EndpointAnnotation {
            rule_name: h.rule_name.clone(),
            instr: h.instr,
            tokens: h.tainted_tokens.clone(),
            channel: h.channel,
            family: h.family,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorCues {
    pub propagation_tokens: Vec<Token>,
    pub provenance_class: Provenance,
    /// Present only on the first frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_endpoint: Option<EndpointAnnotation>,
    /// Present only on the last frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sink_endpoint: Option<EndpointAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowFrame {
    pub function: FunctionId,
    pub label: Token,
    pub provenance: Provenance,
    pub anchors: AnchorCues,
    /// Graph edge that admitted a helper frame; absent on witness frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub justification: Option<PropEdge>,
}

impl FlowFrame {
    pub fn key(&self) -> FrameKey {
        FrameKey {
            function: self.function.clone(),
            data: self.label.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowObject {
    pub id: String,
    pub compact: bool,
    pub frames: Vec<FlowFrame>,
    pub source_annotation: EndpointAnnotation,
    pub sink_annotation: EndpointAnnotation,
    pub witness: Witness,
}

impl FlowObject {
    pub fn keys(&self) -> Vec<FrameKey> {
        self.frames.iter().map(FlowFrame::key).collect()
    }

    fn refresh_id(&mut self) {
        self.id = flow_id(&self.keys());
    }

    /// Witness frame index for each flow frame, `None` for helpers.
    fn witness_positions(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.frames
            .iter()
            .map(|fr| {
                if fr.provenance == Provenance::Witness {
                    next += 1;
                    Some(next - 1)
                } else {
                    None
                }
            })
            .collect()
    }
}

/// One step of a flow as seen by the prefix cache: `<fn>:@:<data>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameKey {
    pub function: FunctionId,
    pub data: String,
}

impl fmt::Display for FrameKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:@:{}", self.function, self.data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed frame key '{0}'")]
pub struct FrameKeyError(pub String);

impl FromStr for FrameKey {
    type Err = FrameKeyError;

    /// Splits at the first separator; function ids never contain it.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(":@:") {
            Some((f, d)) if !f.is_empty() => Ok(FrameKey {
                function: FunctionId::new(f),
                data: d.to_string(),
            }),
            _ => Err(FrameKeyError(s.to_string())),
        }
    }
}

string_serde!(FrameKey);

/// FNV-1a over the newline-joined keys, as 16 hex digits.
pub fn flow_id(keys: &[FrameKey]) -> String {
    let text = keys.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Canonical token order within `function`: global tags by name, then
/// values by definition order, then cell tags.
fn canonical_rank(ff: &FunctionFacts, t: &Token) -> (u8, usize, String) {
    match t {
        Token::Tag(Tag::Global(g)) => (0, 0, g.to_string()),
        Token::Value(v) => (1, ff.definition_rank(v), v.to_string()),
        Token::Tag(Tag::Cell(..)) => (2, 0, t.to_string()),
    }
}

fn canonical_sort(ff: &FunctionFacts, tokens: &mut [Token]) {
    tokens.sort_by_cached_key(|t| canonical_rank(ff, t));
}

/// Exit tokens of a frame that make `edge` carry taint.
fn survivors(exit: &TaintSet, edge: &PropEdge) -> Vec<Token> {
    let f = &edge.from;
    match &edge.meta {
        EdgeMeta::Call(m) => m
            .param_pairs
            .iter()
            .filter(|p| exit.contains_value(f, &p.actual))
            .map(|p| Token::Value(p.actual.clone()))
            .collect(),
        EdgeMeta::Return(m) => m
            .callee_values
            .iter()
            .filter(|v| exit.contains_value(f, v))
            .map(|v| Token::Value(v.clone()))
            .collect(),
        EdgeMeta::Global(g) => {
            let tag = Tag::Global(g.global.clone());
            if exit.tags.contains(&tag) {
                vec![Token::Tag(tag)]
            } else {
                Vec::new()
            }
        }
    }
}

/// Exit tokens relevant to `function`: its own values and cells plus every
/// global tag, in canonical order.
fn propagation_tokens(ff: &FunctionFacts, function: &FunctionId, exit: &TaintSet) -> Vec<Token> {
    let mut out: Vec<Token> = exit
        .tokens_in(function)
        .into_iter()
        .filter(|t| !matches!(t, Token::Tag(Tag::Cell(owner, _)) if owner != function))
        .collect();
    canonical_sort(ff, &mut out);
    out
}

fn build_one(w: &Witness, facts: &FactBase) -> FlowObject {
    let last = w.frames.len() - 1;
    let empty = FunctionFacts::default();
    let frames = w
        .frames
        .iter()
        .enumerate()
        .map(|(i, fr)| {
            let ff = facts.function(&fr.function).unwrap_or(&empty);
            let tokens = propagation_tokens(ff, &fr.function, &fr.exit);
            let label = if i == last {
                w.sink_hit
                    .tainted_tokens
                    .iter()
                    .find(|t| fr.exit.contains(&fr.function, t))
                    .cloned()
            } else {
                let mut s = survivors(&fr.exit, &w.edges[i]);
                canonical_sort(ff, &mut s);
                s.into_iter().next()
            };
            let label = label
                .or_else(|| tokens.first().cloned())
                .expect("accepted witness frames carry taint");
            FlowFrame {
                function: fr.function.clone(),
                label,
                provenance: Provenance::Witness,
                anchors: AnchorCues {
                    propagation_tokens: tokens,
                    provenance_class: Provenance::Witness,
                    source_endpoint: (i == 0).then(|| (&w.source_hit).into()),
                    sink_endpoint: (i == last).then(|| (&w.sink_hit).into()),
                },
                justification: None,
            }
        })
        .collect();
    let mut flow = FlowObject {
        id: String::new(),
        compact: false,
        frames,
        source_annotation: (&w.source_hit).into(),
        sink_annotation: (&w.sink_hit).into(),
        witness: w.clone(),
    };
    flow.refresh_id();
    flow
}

/// One flow per witness, in witness order.
pub fn build_flows(witnesses: &[Witness], facts: &FactBase) -> Vec<FlowObject> {
    witnesses.iter().map(|w| build_one(w, facts)).collect()
}

fn helper(function: &FunctionId, label: Token, provenance: Provenance, edge: &PropEdge) -> FlowFrame {
    FlowFrame {
        function: function.clone(),
        label: label.clone(),
        provenance,
        anchors: AnchorCues {
            propagation_tokens: vec![label],
            provenance_class: provenance,
            source_endpoint: None,
            sink_endpoint: None,
        },
        justification: Some(edge.clone()),
    }
}

/// Adds helper frames backed by token evidence: callees receiving a tainted
/// actual, writers of a consumed global, and callers of the source frame
/// receiving its tainted return. Each helper sits right after the frame that
/// justifies it, or right before it when that frame is the sink frame.
/// Single-frame flows are returned unchanged, since any insertion would
/// displace an endpoint.
pub fn enrich_flow(flow: &FlowObject, facts: &FactBase, graph: &PropagationGraph, bounds: &WitnessBounds) -> FlowObject {
    let mut out = flow.clone();
    if flow.frames.len() < 2 {
        return out;
    }
    let mut present: BTreeSet<FunctionId> = flow.frames.iter().map(|f| f.function.clone()).collect();
    let mut budget = bounds.max_global_fanout;
    let positions = flow.witness_positions();
    let mut helpers: Vec<Vec<FlowFrame>> = vec![Vec::new(); flow.frames.len()];

    for (slot, wi) in positions.iter().enumerate() {
        let Some(wi) = *wi else { continue };
        let fr = &flow.witness.frames[wi];
        let f = &fr.function;
        let Ok(edges) = graph.out_edges(f) else { continue };
        let mut add = |function: &FunctionId, label: Token, prov: Provenance, edge: &PropEdge, present: &mut BTreeSet<FunctionId>| {
            if budget > 0 && present.insert(function.clone()) {
                budget -= 1;
                helpers[slot].push(helper(function, label, prov, edge));
            }
        };
        for e in edges {
            if let EdgeMeta::Call(m) = &e.meta {
                let next = transfer_across_edge(&fr.exit, e);
                let formal = m.param_pairs.iter().find(|p| next.contains_value(&e.to, &p.formal));
                if let Some(p) = formal {
                    add(&e.to, Token::Value(p.formal.clone()), Provenance::DefuseProven, e, &mut present);
                }
            }
        }
        for tag in &fr.exit.tags {
            let Tag::Global(g) = tag else { continue };
            let Some(summary) = facts.global_summaries.get(g) else { continue };
            if !summary.readers.iter().any(|r| &r.function == f) {
                continue;
            }
            for w in &summary.writers {
                let edge = graph.out_edges(&w.function).ok().and_then(|es| {
                    es.iter()
                        .find(|e| &e.to == f && matches!(&e.meta, EdgeMeta::Global(l) if &l.global == g))
                });
                if let Some(e) = edge {
                    add(&w.function, Token::Tag(tag.clone()), Provenance::GlobalProven, e, &mut present);
                }
            }
        }
        if wi == 0 {
            for e in edges {
                if let EdgeMeta::Return(m) = &e.meta {
                    if transfer_across_edge(&fr.exit, e).has_values() {
                        add(&e.to, Token::Value(m.caller_value.clone()), Provenance::ContextOnly, e, &mut present);
                    }
                }
            }
        }
    }

    let last = flow.frames.len() - 1;
    out.frames = Vec::with_capacity(flow.frames.len());
    for (i, (fr, extra)) in flow.frames.iter().zip(helpers).enumerate() {
        if i == last {
            out.frames.extend(extra);
            out.frames.push(fr.clone());
        } else {
            out.frames.push(fr.clone());
            out.frames.extend(extra);
        }
    }
    out.refresh_id();
    out
}

/// Drops context-only frames.
pub fn compact_view(flow: &FlowObject) -> FlowObject {
    let mut out = flow.clone();
    out.frames.retain(|f| f.provenance != Provenance::ContextOnly);
    out.compact = true;
    out.refresh_id();
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Deduped {
    pub flows: Vec<FlowObject>,
    pub raw: usize,
    pub deduped: usize,
}

/// Keeps the first flow of each distinct key sequence, preserving order.
pub fn dedupe_flows(flows: Vec<FlowObject>) -> Deduped {
    let raw = flows.len();
    let mut seen = BTreeSet::new();
    let flows: Vec<FlowObject> = flows.into_iter().filter(|f| seen.insert(f.keys())).collect();
    Deduped {
        deduped: flows.len(),
        flows,
        raw,
    }
}

pub fn flows_to_json(flows: &[FlowObject]) -> String {
    write_document(FLOWS_SCHEMA, &[], "flows", flows).expect("flow records serialize")
}

pub fn flows_from_json(text: &str) -> Result<Vec<FlowObject>, DocumentError> {
    read_document(text, FLOWS_SCHEMA, "flows").map(|(_, flows)| flows)
}
