//! The typed interprocedural propagation graph.
//!
//! Nodes are the functions with bodies. Edges are derived from the fact base
//! alone, so rebuilding from equal facts yields an equal graph.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::facts::{ActualFormal, FactBase};
use crate::ir::{FunctionId, InstrId, ValueId};
use crate::json::{read_document, write_document, DocumentError};

pub const GRAPH_SCHEMA: &str = "defuse-graph/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Call,
    Return,
    Global,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::Call => "call",
            EdgeKind::Return => "return",
            EdgeKind::Global => "global",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CallMeta {
    pub call_instr: InstrId,
    pub param_pairs: Vec<ParamPair>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamPair {
    pub actual: ValueId,
    pub index: usize,
    pub formal: ValueId,
}

/// Any of `callee_values` reaching the callee's `ret` flows into
/// `caller_value` at `call_instr`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReturnMeta {
    pub call_instr: InstrId,
    pub callee_values: Vec<ValueId>,
    pub caller_value: ValueId,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GlobalLink {
    pub global: ValueId,
    pub writer_instr: InstrId,
    pub reader_instr: InstrId,
    pub reader_value: ValueId,
}

/// Transfer metadata; the variant fixes the edge kind.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "meta", rename_all = "lowercase")]
pub enum EdgeMeta {
    Call(CallMeta),
    Return(ReturnMeta),
    Global(GlobalLink),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PropEdge {
    pub from: FunctionId,
    pub to: FunctionId,
    #[serde(flatten)]
    pub meta: EdgeMeta,
}

impl PropEdge {
    pub fn kind(&self) -> EdgeKind {
        match self.meta {
            EdgeMeta::Call(_) => EdgeKind::Call,
            EdgeMeta::Return(_) => EdgeKind::Return,
            EdgeMeta::Global(_) => EdgeKind::Global,
        }
    }

    fn sort_key(&self) -> (&FunctionId, &FunctionId, EdgeKind, &EdgeMeta) {
        (&self.from, &self.to, self.kind(), &self.meta)
    }
}

impl fmt::Display for PropEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}->{}", self.kind(), self.from, self.to)?;
        if let EdgeMeta::Global(g) = &self.meta {
            write!(f, ", {}", g.global)?;
        }
        f.write_str(")")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("unknown function '{0}'")]
    UnknownFunction(FunctionId),
    #[error("hop count must be at least 1")]
    ZeroHops,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "GraphParts")]
pub struct PropagationGraph {
    pub nodes: BTreeSet<FunctionId>,
    pub edges: Vec<PropEdge>,
    #[serde(skip)]
    by_source: BTreeMap<FunctionId, (usize, usize)>,
}

#[derive(Deserialize)]
struct GraphParts {
    nodes: BTreeSet<FunctionId>,
    edges: Vec<PropEdge>,
}

impl From<GraphParts> for PropagationGraph {
    fn from(p: GraphParts) -> Self {
        PropagationGraph::new(p.nodes, p.edges)
    }
}

impl PropagationGraph {
    pub fn new(nodes: BTreeSet<FunctionId>, mut edges: Vec<PropEdge>) -> Self {
        edges.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        edges.dedup();
        let mut by_source: BTreeMap<FunctionId, (usize, usize)> = BTreeMap::new();
        for (i, e) in edges.iter().enumerate() {
            by_source
                .entry(e.from.clone())
                .and_modify(|r| r.1 = i + 1)
                .or_insert((i, i + 1));
        }
        PropagationGraph {
            nodes,
            edges,
            by_source,
        }
    }

    pub fn out_edges(&self, f: &FunctionId) -> Result<&[PropEdge], GraphError> {
        if !self.nodes.contains(f) {
            return Err(GraphError::UnknownFunction(f.clone()));
        }
        Ok(match self.by_source.get(f) {
            Some(&(lo, hi)) => &self.edges[lo..hi],
            None => &[],
        })
    }

    /// Indices into `edges` of the out-edges of `f`; empty for unknown ids.
    pub fn out_edge_indices(&self, f: &FunctionId) -> std::ops::Range<usize> {
        match self.by_source.get(f) {
            Some(&(lo, hi)) => lo..hi,
            None => 0..0,
        }
    }

    pub fn count_by_kind(&self) -> BTreeMap<EdgeKind, usize> {
        let mut out = BTreeMap::new();
        for e in &self.edges {
            *out.entry(e.kind()).or_insert(0) += 1;
        }
        out
    }

    /// Direct callees of `f` along call edges.
    pub fn callees<'a>(&'a self, f: &'a FunctionId) -> impl Iterator<Item = &'a FunctionId> {
        self.edges
            .iter()
            .filter(move |e| &e.from == f && e.kind() == EdgeKind::Call)
            .map(|e| &e.to)
    }

    /// Functions reachable from `seed` within `k` call edges, seed included.
    pub fn cg_khop_context(
        &self,
        seed: &FunctionId,
        k: usize,
    ) -> Result<BTreeSet<FunctionId>, GraphError> {
        if !self.nodes.contains(seed) {
            return Err(GraphError::UnknownFunction(seed.clone()));
        }
        if k == 0 {
            return Err(GraphError::ZeroHops);
        }
        let mut seen: BTreeSet<FunctionId> = BTreeSet::from([seed.clone()]);
        let mut queue = VecDeque::from([(seed.clone(), 0usize)]);
        while let Some((f, d)) = queue.pop_front() {
            if d == k {
                continue;
            }
            for c in self.callees(&f) {
                if seen.insert(c.clone()) {
                    queue.push_back((c.clone(), d + 1));
                }
            }
        }
        Ok(seen)
    }

    /// True when `to` is reachable from `from` over call edges whose
    /// endpoints all lie in `within`.
    pub fn call_reachable(
        &self,
        from: &FunctionId,
        to: &FunctionId,
        within: &BTreeSet<FunctionId>,
    ) -> bool {
        if !within.contains(from) || !within.contains(to) {
            return false;
        }
        let mut seen = BTreeSet::from([from]);
        let mut stack = vec![from];
        while let Some(f) = stack.pop() {
            if f == to {
                return true;
            }
            for c in self.callees(f) {
                if within.contains(c) && seen.insert(c) {
                    stack.push(c);
                }
            }
        }
        false
    }

    pub fn to_json(&self) -> String {
        let nodes = serde_json::to_value(&self.nodes).expect("node ids serialize");
        write_document(GRAPH_SCHEMA, &[("nodes", nodes)], "edges", &self.edges)
            .expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DocumentError> {
        let (mut header, edges) = read_document::<PropEdge>(text, GRAPH_SCHEMA, "edges")?;
        let nodes = header.remove("nodes").ok_or(DocumentError::Missing("nodes"))?;
        let nodes: BTreeSet<FunctionId> = serde_json::from_value(nodes)?;
        Ok(PropagationGraph::new(nodes, edges))
    }
}

fn param_pairs(pairs: &[ActualFormal]) -> Vec<ParamPair> {
    pairs
        .iter()
        .filter_map(|p| {
            p.formal.as_ref().map(|formal| ParamPair {
                actual: p.actual.clone(),
                index: p.index,
                formal: formal.clone(),
            })
        })
        .collect()
}

/// Builds the propagation graph of `facts`.
pub fn build_graph(facts: &FactBase) -> PropagationGraph {
    let nodes: BTreeSet<FunctionId> = facts.per_function.keys().cloned().collect();
    let mut edges: Vec<PropEdge> = Vec::new();

    for c in &facts.call_facts {
        if !c.resolved || !nodes.contains(&c.callee) {
            continue;
        }
        edges.push(PropEdge {
            from: c.caller.clone(),
            to: c.callee.clone(),
            meta: EdgeMeta::Call(CallMeta {
                call_instr: c.call_instr,
                param_pairs: param_pairs(&c.actual_to_formal),
            }),
        });
        if let Some(result) = &c.returns_value_to {
            let callee_values = facts.per_function[&c.callee]
                .returned_values()
                .into_iter()
                .cloned()
                .collect();
            edges.push(PropEdge {
                from: c.callee.clone(),
                to: c.caller.clone(),
                meta: EdgeMeta::Return(ReturnMeta {
                    call_instr: c.call_instr,
                    callee_values,
                    caller_value: result.clone(),
                }),
            });
        }
    }

    for (g, summary) in &facts.global_summaries {
        let writer_fns: BTreeSet<&FunctionId> = summary.writers.iter().map(|w| &w.function).collect();
        let reader_fns: BTreeSet<&FunctionId> = summary.readers.iter().map(|r| &r.function).collect();
        for wf in &writer_fns {
            for rf in &reader_fns {
                let writer = summary.writers.iter().find(|w| &w.function == *wf);
                let reader = summary.readers.iter().find(|r| {
                    &r.function == *rf && (wf != rf || writer.is_some_and(|w| w.instr != r.instr))
                });
                if let (Some(w), Some(r)) = (writer, reader) {
                    edges.push(PropEdge {
                        from: (*wf).clone(),
                        to: (*rf).clone(),
                        meta: EdgeMeta::Global(GlobalLink {
                            global: g.clone(),
                            writer_instr: w.instr,
                            reader_instr: r.instr,
                            reader_value: r.value.clone(),
                        }),
                    });
                }
            }
        }
    }

    PropagationGraph::new(nodes, edges)
}
