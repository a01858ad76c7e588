//! Bounded witness search.
//!
//! A witness is a path `f0 -> .. -> fk` over the propagation graph along
//! which taint introduced at a source survives every boundary and reaches a
//! sink's demanded operand in the last frame. Search is breadth-first, so the
//! shortest witnesses of each (source, sink) pair are found first.

mod taint;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::facts::{EndpointHit, FactBase};
use crate::graph::{EdgeKind, EdgeMeta, PropEdge, PropagationGraph};
use crate::ir::FunctionId;
use crate::token::Tag;

pub use taint::{expand_local_taint, expand_traced, ExpansionBudgetExceeded, Expansion, TaintSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WitnessBounds {
    pub max_path_edges: usize,
    pub max_local_expansion_steps: usize,
    pub max_witnesses_per_pair: usize,
    pub max_global_fanout: usize,
}

impl Default for WitnessBounds {
    fn default() -> Self {
        WitnessBounds {
            max_path_edges: 8,
            max_local_expansion_steps: 64,
            max_witnesses_per_pair: 4,
            max_global_fanout: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bound '{0}' must be positive")]
pub struct InvalidBound(pub &'static str);

impl WitnessBounds {
    pub fn validate(&self) -> Result<(), InvalidBound> {
        for (name, v) in [
            ("max_path_edges", self.max_path_edges),
            ("max_local_expansion_steps", self.max_local_expansion_steps),
            ("max_witnesses_per_pair", self.max_witnesses_per_pair),
            ("max_global_fanout", self.max_global_fanout),
        ] {
            if v == 0 {
                return Err(InvalidBound(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub function: FunctionId,
    pub entry: TaintSet,
    pub exit: TaintSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    pub frames: Vec<Frame>,
    pub edges: Vec<PropEdge>,
    pub source_hit: EndpointHit,
    pub sink_hit: EndpointHit,
    pub accepted: bool,
}

impl Witness {
    pub fn functions(&self) -> impl Iterator<Item = &FunctionId> {
        self.frames.iter().map(|f| &f.function)
    }

    fn order_key(&self) -> impl Ord + '_ {
        (
            (&self.source_hit.rule_name, &self.source_hit.function, self.source_hit.instr),
            (&self.sink_hit.rule_name, &self.sink_hit.function, self.sink_hit.instr),
            self.frames.iter().map(|f| &f.function).collect::<Vec<_>>(),
            self.edges.iter().map(|e| (e.kind(), &e.meta)).collect::<Vec<_>>(),
        )
    }
}

/// Counters for branches the search abandoned.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WitnessDiagnostics {
    pub paths_explored: usize,
    /// Transfers that carried no value token.
    pub dead_transfers: usize,
    pub budget_exceeded: usize,
    /// Paths cut at `max_path_edges` with edges still available.
    pub depth_limited: usize,
    /// Global edges skipped by `max_global_fanout`.
    pub fanout_limited: usize,
    /// Accepting paths dropped by `max_witnesses_per_pair`.
    pub pair_cap_reached: usize,
}

impl WitnessDiagnostics {
    fn absorb(&mut self, o: &WitnessDiagnostics) {
        self.paths_explored += o.paths_explored;
        self.dead_transfers += o.dead_transfers;
        self.budget_exceeded += o.budget_exceeded;
        self.depth_limited += o.depth_limited;
        self.fanout_limited += o.fanout_limited;
        self.pair_cap_reached += o.pair_cap_reached;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WitnessSearch {
    pub witnesses: Vec<Witness>,
    pub diagnostics: WitnessDiagnostics,
}

/// Maps a frame's exit set across `edge`. Tags always carry over; the result
/// is live only if it holds a value token in `edge.to`.
pub fn transfer_across_edge(exit: &TaintSet, edge: &PropEdge) -> TaintSet {
    let mut out = TaintSet {
        values: BTreeSet::new(),
        tags: exit.tags.clone(),
    };
    match &edge.meta {
        EdgeMeta::Call(m) => {
            for p in &m.param_pairs {
                if exit.contains_value(&edge.from, &p.actual) {
                    out.values.insert((edge.to.clone(), p.formal.clone()));
                }
            }
        }
        EdgeMeta::Return(m) => {
            if m.callee_values.iter().any(|v| exit.contains_value(&edge.from, v)) {
                out.values.insert((edge.to.clone(), m.caller_value.clone()));
            }
        }
        EdgeMeta::Global(g) => {
            if exit.tags.contains(&Tag::Global(g.global.clone())) {
                out.values.insert((edge.to.clone(), g.reader_value.clone()));
            }
        }
    }
    out
}

/// Indices of the sink hits in `function` whose demanded tokens meet `exit`.
fn reached_sinks(sinks: &[EndpointHit], function: &FunctionId, exit: &TaintSet) -> Vec<usize> {
    sinks
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            &s.function == function && s.tainted_tokens.iter().any(|t| exit.contains(function, t))
        })
        .map(|(i, _)| i)
        .collect()
}

struct Partial {
    frames: Vec<Frame>,
    edges: Vec<usize>,
    /// Sinks already accepted by a prefix of this path.
    reached: BTreeSet<usize>,
}

fn search_from(
    source: &EndpointHit,
    graph: &PropagationGraph,
    facts: &FactBase,
    bounds: &WitnessBounds,
) -> WitnessSearch {
    let mut diag = WitnessDiagnostics::default();
    let mut out: Vec<Witness> = Vec::new();
    let mut per_pair: BTreeMap<usize, usize> = BTreeMap::new();

    let Some(first_facts) = facts.function(&source.function) else {
        return WitnessSearch {
            witnesses: out,
            diagnostics: diag,
        };
    };
    let entry = TaintSet::from_tokens(&source.function, &source.tainted_tokens);
    let exit = match expand_local_taint(first_facts, &source.function, &entry, bounds) {
        Ok(e) => e,
        Err(_) => {
            diag.budget_exceeded += 1;
            return WitnessSearch {
                witnesses: out,
                diagnostics: diag,
            };
        }
    };
    let mut queue = VecDeque::from([Partial {
        frames: vec![Frame {
            function: source.function.clone(),
            entry,
            exit,
        }],
        edges: Vec::new(),
        reached: BTreeSet::new(),
    }]);

    while let Some(mut path) = queue.pop_front() {
        diag.paths_explored += 1;
        let last = path.frames.last().expect("paths have a frame");
        for ix in reached_sinks(&facts.sink_hits, &last.function, &last.exit) {
            if !path.reached.insert(ix) {
                continue;
            }
            let n = per_pair.entry(ix).or_insert(0);
            if *n >= bounds.max_witnesses_per_pair {
                diag.pair_cap_reached += 1;
                continue;
            }
            *n += 1;
            out.push(Witness {
                frames: path.frames.clone(),
                edges: path.edges.iter().map(|&e| graph.edges[e].clone()).collect(),
                source_hit: source.clone(),
                sink_hit: facts.sink_hits[ix].clone(),
                accepted: true,
            });
        }

        let here = last.function.clone();
        let mut ordered: Vec<usize> = graph
            .out_edge_indices(&here)
            .filter(|i| !path.edges.contains(i))
            .collect();
        ordered.sort_by(|&a, &b| {
            let (ea, eb) = (&graph.edges[a], &graph.edges[b]);
            (ea.kind(), &ea.to, a).cmp(&(eb.kind(), &eb.to, b))
        });
        if ordered.is_empty() {
            continue;
        }
        if path.edges.len() >= bounds.max_path_edges {
            diag.depth_limited += 1;
            continue;
        }
        let mut globals_taken = 0usize;
        for e in ordered {
            let edge = &graph.edges[e];
            if edge.kind() == EdgeKind::Global {
                if globals_taken >= bounds.max_global_fanout {
                    diag.fanout_limited += 1;
                    continue;
                }
                globals_taken += 1;
            }
            let entry = transfer_across_edge(&path.frames.last().expect("frame").exit, edge);
            if !entry.has_values() {
                diag.dead_transfers += 1;
                continue;
            }
            let Some(callee_facts) = facts.function(&edge.to) else { continue };
            let exit = match expand_local_taint(callee_facts, &edge.to, &entry, bounds) {
                Ok(x) => x,
                Err(_) => {
                    diag.budget_exceeded += 1;
                    continue;
                }
            };
            let mut frames = path.frames.clone();
            frames.push(Frame {
                function: edge.to.clone(),
                entry,
                exit,
            });
            let mut edges = path.edges.clone();
            edges.push(e);
            queue.push_back(Partial {
                frames,
                edges,
                reached: path.reached.clone(),
            });
        }
    }

    WitnessSearch {
        witnesses: out,
        diagnostics: diag,
    }
}

/// Enumerates accepted witnesses for every source hit of `facts`.
pub fn find_witnesses(
    graph: &PropagationGraph,
    facts: &FactBase,
    bounds: &WitnessBounds,
) -> WitnessSearch {
    let per_source: Vec<WitnessSearch> = facts
        .source_hits
        .par_iter()
        .map(|s| search_from(s, graph, facts, bounds))
        .collect();
    let mut witnesses: Vec<Witness> = Vec::new();
    let mut diagnostics = WitnessDiagnostics::default();
    for s in per_source {
        witnesses.extend(s.witnesses);
        diagnostics.absorb(&s.diagnostics);
    }
    witnesses.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
    WitnessSearch {
        witnesses,
        diagnostics,
    }
}
