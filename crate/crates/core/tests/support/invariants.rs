//! Checkers for the documented invariants, one function per stage. Each
//! panics with context on the first broken property.

use std::collections::{BTreeSet, HashSet};
use std::sync::Mutex;

use defuse_core::detector::{analyze_flow, detect_flows, Decision, FunctionView, Reasoner, ReasonerFailure};
use defuse_core::facts::FactBase;
use defuse_core::flows::{flow_id, AnchorCues, Provenance};
use defuse_core::graph::EdgeMeta;
use defuse_core::ir::{CastOp, InstrKind, Operand, OperandValue, ParseMode};
use defuse_core::witness::{expand_local_taint, transfer_across_edge, Frame};
use defuse_core::*;

/// Parse determinism, strict/tolerant agreement, and definitions preceding
/// uses in block order (phi operands excepted).
pub fn check_ir(text: &str, m: &IrModule) {
    let strict = ParseOptions::strict().named(&m.name);
    assert_eq!(&parse_module(text, &strict).unwrap(), m, "{}: reparse differs", m.name);
    let mut tolerant = strict.clone();
    tolerant.mode = ParseMode::Tolerant;
    assert_eq!(&parse_module(text, &tolerant).unwrap(), m, "{}: tolerant parse differs", m.name);
    for f in m.defined_functions() {
        let mut defined: HashSet<&ValueId> = f.params.iter().filter_map(|p| p.id.as_ref()).collect();
        for i in f.instructions() {
            if !matches!(i.kind, InstrKind::Phi { .. }) {
                for op in i.operands() {
                    if let OperandValue::Local(v) = &op.value {
                        assert!(defined.contains(v), "{}::{} uses {v} before defining it", m.name, f.id);
                    }
                }
            }
            if let Some(r) = &i.result {
                assert!(defined.insert(r), "{}::{} defines {r} twice", m.name, f.id);
            }
        }
    }
}

/// def_use lists exactly the instructions that read each local or argument.
pub fn check_def_use(m: &IrModule) {
    let facts = extract_facts(m, &SourceSinkModel::default_model());
    for f in m.defined_functions() {
        let ff = facts.function(&f.id).unwrap();
        let mut actual = BTreeSet::new();
        for i in f.instructions() {
            for op in i.operands() {
                if let Some(v) = op.local_id() {
                    actual.insert((v.clone(), i.id));
                }
            }
        }
        let recorded: BTreeSet<_> = ff
            .def_use
            .iter()
            .flat_map(|(v, ids)| ids.iter().map(move |i| (v.clone(), *i)))
            .collect();
        assert_eq!(recorded, actual, "{}::{}", m.name, f.id);
    }
}

/// Every direct store or load of a global shows up in its summary, and
/// nothing else does.
pub fn check_global_summaries(m: &IrModule) {
    let facts = extract_facts(m, &SourceSinkModel::default_model());
    let mut writes = BTreeSet::new();
    let mut reads = BTreeSet::new();
    for f in m.defined_functions() {
        let global_root = |addr: &Operand| {
            let mut op = addr.clone();
            loop {
                match &op.value {
                    OperandValue::Global(g) => return Some(g.clone()),
                    OperandValue::Local(v) => match f.definition(v).map(|d| &d.kind) {
                        Some(InstrKind::Cast {
                            op: CastOp::Bitcast,
                            value,
                        }) => op = value.clone(),
                        _ => return None,
                    },
                    _ => return None,
                }
            }
        };
        for i in f.instructions() {
            match &i.kind {
                InstrKind::Store { addr, .. } => {
                    if let Some(g) = global_root(addr) {
                        writes.insert((g, f.id.clone(), i.id));
                    }
                }
                InstrKind::Load { addr } => {
                    if let Some(g) = global_root(addr) {
                        reads.insert((g, f.id.clone(), i.id, i.result.clone().unwrap()));
                    }
                }
                _ => {}
            }
        }
    }
    let mut got_w = BTreeSet::new();
    let mut got_r = BTreeSet::new();
    for (g, s) in &facts.global_summaries {
        assert_eq!(&s.global_id, g);
        for w in &s.writers {
            got_w.insert((g.clone(), w.function.clone(), w.instr));
        }
        for r in &s.readers {
            got_r.insert((g.clone(), r.function.clone(), r.instr, r.value.clone()));
        }
    }
    assert_eq!(got_w, writes, "{}", m.name);
    assert_eq!(got_r, reads, "{}", m.name);
}

/// Dropping one rule removes exactly that rule's hits.
pub fn check_rule_removal(m: &IrModule) {
    let model = SourceSinkModel::default_model();
    let full = extract_facts(m, &model);
    let names: Vec<String> = model
        .sources
        .iter()
        .map(|r| r.name.clone())
        .chain(model.sinks.iter().map(|r| r.name.clone()))
        .collect();
    for name in names {
        let reduced = extract_facts(m, &model.without_rule(&name));
        let keep = |hits: &[EndpointHit]| -> Vec<_> { hits.iter().filter(|h| h.rule_name != name).cloned().collect() };
        assert_eq!(reduced.source_hits, keep(&full.source_hits), "{} -{name}", m.name);
        assert_eq!(reduced.sink_hits, keep(&full.sink_hits), "{} -{name}", m.name);
        assert_eq!(reduced.per_function, full.per_function);
        assert_eq!(reduced.call_facts, full.call_facts);
        assert_eq!(reduced.global_summaries, full.global_summaries);
    }
}

/// Kind/metadata agreement for every edge, rebuild determinism, global-edge
/// soundness and k-hop monotonicity.
pub fn check_graph(m: &IrModule) {
    let facts = extract_facts(m, &SourceSinkModel::default_model());
    let g = build_graph(&facts);
    assert_eq!(g.to_json(), build_graph(&facts).to_json(), "{}: rebuild differs", m.name);
    for e in &g.edges {
        let json = serde_json::to_value(e).unwrap();
        assert_eq!(json["kind"], e.kind().to_string(), "{}", m.name);
        match &e.meta {
            EdgeMeta::Call(c) => {
                assert_eq!(e.kind(), EdgeKind::Call);
                let call = facts.call_at(&e.from, c.call_instr).expect("call edge has a call fact");
                assert!(call.resolved && call.callee == e.to);
            }
            EdgeMeta::Return(r) => {
                assert_eq!(e.kind(), EdgeKind::Return);
                let call = facts.call_at(&e.to, r.call_instr).expect("return edge has a call fact");
                assert_eq!(call.callee, e.from);
                assert_eq!(call.returns_value_to.as_ref(), Some(&r.caller_value));
                assert!(!r.callee_values.is_empty());
            }
            EdgeMeta::Global(l) => {
                assert_eq!(e.kind(), EdgeKind::Global);
                let s = &facts.global_summaries[&l.global];
                assert!(s.writers.iter().any(|w| w.function == e.from && w.instr == l.writer_instr));
                assert!(s
                    .readers
                    .iter()
                    .any(|r| r.function == e.to && r.instr == l.reader_instr && r.value == l.reader_value));
            }
        }
    }
    for n in &g.nodes {
        for k in 1..4 {
            let small = g.cg_khop_context(n, k).unwrap();
            assert!(small.is_subset(&g.cg_khop_context(n, k + 1).unwrap()), "{} {n} k={k}", m.name);
        }
    }
}

/// Replays every frame of every witness from its source.
pub fn check_replay(m: &IrModule, facts: &FactBase, bounds: &WitnessBounds) {
    let graph = build_graph(facts);
    for w in find_witnesses(&graph, facts, bounds).witnesses {
        assert!(w.accepted);
        assert_eq!(w.frames.len(), w.edges.len() + 1, "{}", m.name);
        let first = &w.frames[0];
        assert_eq!(first.function, w.source_hit.function);
        assert_eq!(first.entry, TaintSet::from_tokens(&first.function, &w.source_hit.tainted_tokens));
        for (i, fr) in w.frames.iter().enumerate() {
            let ff = facts.function(&fr.function).unwrap();
            let exit = expand_local_taint(ff, &fr.function, &fr.entry, bounds).unwrap();
            assert_eq!(exit, fr.exit, "{} frame {i}", m.name);
            if let Some(e) = w.edges.get(i) {
                assert_eq!(e.from, fr.function);
                assert_eq!(e.to, w.frames[i + 1].function);
                assert_eq!(transfer_across_edge(&fr.exit, e), w.frames[i + 1].entry);
            }
        }
        let last = w.frames.last().unwrap();
        assert_eq!(last.function, w.sink_hit.function);
        assert!(w.sink_hit.tainted_tokens.iter().any(|t| last.exit.contains(&last.function, t)));
    }
}

/// Witness search is deterministic and enlarging a bound never loses a pair.
pub fn check_search_laws(m: &IrModule) {
    let facts = extract_facts(m, &SourceSinkModel::default_model());
    let graph = build_graph(&facts);
    let b = WitnessBounds::default();
    let pairs = |b: &WitnessBounds| -> BTreeSet<(EndpointHit, EndpointHit)> {
        find_witnesses(&graph, &facts, b)
            .witnesses
            .into_iter()
            .map(|w| (w.source_hit, w.sink_hit))
            .collect()
    };
    assert_eq!(find_witnesses(&graph, &facts, &b), find_witnesses(&graph, &facts, &b), "{}", m.name);
    let base = pairs(&b);
    for wider in [
        WitnessBounds { max_path_edges: b.max_path_edges + 4, ..b },
        WitnessBounds { max_local_expansion_steps: b.max_local_expansion_steps * 4, ..b },
        WitnessBounds { max_witnesses_per_pair: b.max_witnesses_per_pair + 4, ..b },
        WitnessBounds { max_global_fanout: b.max_global_fanout * 2, ..b },
    ] {
        assert!(base.is_subset(&pairs(&wider)), "{}: a wider bound lost a pair", m.name);
    }
}

pub struct Sliced {
    pub facts: FactBase,
    pub graph: PropagationGraph,
    pub flows: Vec<FlowObject>,
    pub enriched: Vec<FlowObject>,
}

pub fn slice(m: &IrModule, bounds: &WitnessBounds) -> Sliced {
    let facts = extract_facts(m, &SourceSinkModel::default_model());
    let graph = build_graph(&facts);
    let ws = find_witnesses(&graph, &facts, bounds).witnesses;
    let flows = build_flows(&ws, &facts);
    let enriched = flows.iter().map(|f| enrich_flow(f, &facts, &graph, bounds)).collect();
    Sliced {
        facts,
        graph,
        flows,
        enriched,
    }
}

impl Sliced {
    /// Plain, enriched and compact variants of every flow.
    pub fn variants(&self) -> Vec<Vec<FlowObject>> {
        vec![
            self.flows.clone(),
            self.enriched.clone(),
            self.enriched.iter().map(compact_view).collect(),
        ]
    }
}

/// Every documented flow invariant, on one module.
pub fn check_flow_invariants(r: &Sliced, bounds: &WitnessBounds) {
    for (plain, rich) in r.flows.iter().zip(&r.enriched) {
        for flow in [plain, rich, &compact_view(rich)] {
            let w = &flow.witness;
            let first = flow.frames.first().unwrap();
            let last = flow.frames.last().unwrap();
            assert_eq!(first.function, w.source_hit.function);
            assert_eq!(last.function, w.sink_hit.function);
            assert_eq!(first.provenance, Provenance::Witness);
            assert_eq!(last.provenance, Provenance::Witness);
            // endpoint fidelity
            assert_eq!(flow.source_annotation.rule_name, w.source_hit.rule_name);
            assert_eq!(flow.source_annotation.instr, w.source_hit.instr);
            assert_eq!(flow.source_annotation.tokens, w.source_hit.tainted_tokens);
            assert_eq!(flow.sink_annotation.tokens, w.sink_hit.tainted_tokens);
            assert_eq!(first.anchors.source_endpoint.as_ref(), Some(&flow.source_annotation));
            assert_eq!(last.anchors.sink_endpoint.as_ref(), Some(&flow.sink_annotation));
            for (i, fr) in flow.frames.iter().enumerate() {
                assert_eq!(fr.anchors.provenance_class, fr.provenance);
                assert_eq!(fr.anchors.source_endpoint.is_some(), i == 0);
                assert_eq!(fr.anchors.sink_endpoint.is_some(), i == flow.frames.len() - 1);
                check_label_housed(&r.facts, fr.function.as_str(), &fr.label);
                let key = fr.key();
                assert_eq!(key.to_string().parse::<FrameKey>().unwrap(), key);
            }
            // witness frames are exactly the witness path, in order
            let wf: Vec<_> = flow
                .frames
                .iter()
                .filter(|f| f.provenance == Provenance::Witness)
                .map(|f| &f.function)
                .collect();
            assert_eq!(wf, w.functions().collect::<Vec<_>>());
            assert!(flow.frames.len() <= w.frames.len() + bounds.max_global_fanout);
            check_justifications(r, flow);
            // the sink label is a demanded operand
            assert!(w.sink_hit.tainted_tokens.contains(&last.label));
            assert_eq!(flow.id, flow_id(&flow.keys()));
        }
    }
}

pub fn check_label_housed(facts: &FactBase, function: &str, label: &Token) {
    let f = facts.per_function.keys().find(|k| k.as_str() == function).unwrap();
    let ff = &facts.per_function[f];
    let ok = match label {
        Token::Value(v) => ff.definitions.contains(v),
        Token::Tag(Tag::Global(g)) => facts.global_summaries.get(g).is_some_and(|s| {
            s.writers.iter().any(|w| &w.function == f) || s.readers.iter().any(|r| &r.function == f)
        }),
        Token::Tag(Tag::Cell(owner, _)) => owner == f,
    };
    assert!(ok, "label {label} not housed in {function}");
}

/// Helper frames replay: the recorded edge exists and carries the label.
fn check_justifications(r: &Sliced, flow: &FlowObject) {
    for (pos, fr) in flow.frames.iter().enumerate() {
        let Some(e) = &fr.justification else {
            assert_eq!(fr.provenance, Provenance::Witness);
            continue;
        };
        assert!(r.graph.edges.contains(e));
        let anchor = if fr.provenance == Provenance::GlobalProven { &e.to } else { &e.from };
        // a function may occur on the witness more than once
        let candidates: Vec<_> = flow.witness.frames.iter().filter(|w| &w.function == anchor).collect();
        assert!(!candidates.is_empty(), "justifying frame is on the witness");
        let replays = |justifying: &Frame| match (&e.meta, fr.provenance) {
            (EdgeMeta::Call(_), Provenance::DefuseProven) => {
                e.to == fr.function && transfer_across_edge(&justifying.exit, e).contains(&fr.function, &fr.label)
            }
            (EdgeMeta::Return(_), Provenance::ContextOnly) => {
                e.to == fr.function
                    && justifying.function == flow.witness.frames[0].function
                    && transfer_across_edge(&justifying.exit, e).contains(&fr.function, &fr.label)
            }
            (EdgeMeta::Global(l), Provenance::GlobalProven) => {
                e.from == fr.function
                    && fr.label == Token::Tag(Tag::Global(l.global.clone()))
                    && justifying.exit.tags.contains(&Tag::Global(l.global.clone()))
            }
            _ => false,
        };
        assert!(candidates.iter().any(|j| replays(j)), "{} does not replay", fr.key());
        let justifying = candidates[0];
        // helpers sit next to their justifying frame or to other helpers
        let neighbours = [pos.checked_sub(1), Some(pos + 1)];
        assert!(neighbours
            .iter()
            .flatten()
            .filter_map(|i| flow.frames.get(*i))
            .any(|n| n.function == justifying.function || n.provenance != Provenance::Witness));
    }
}

/// Records the views it is shown and delegates to the reference reasoner.
struct Recording<'m> {
    inner: ReferenceReasoner<'m>,
    seen: Mutex<Vec<FunctionView>>,
}

impl Reasoner for Recording<'_> {
    fn step(&self, s: &ReasoningState, v: &FunctionView, a: &AnchorCues) -> Result<ReasoningState, ReasonerFailure> {
        self.seen.lock().unwrap().push(v.clone());
        self.inner.step(s, v, a)
    }
}

/// Memoization exactness, cache transparency, dual views on endpoint frames
/// only, the decision law and key round-trips, over one flow set.
pub fn check_detector(m: &IrModule, flows: &[FlowObject]) {
    let model = SourceSinkModel::default_model();
    let reasoner = ReferenceReasoner::new(m, &model);
    let trie = PrefixTrie::new();
    let cold = detect_flows(flows, m, &reasoner, &trie).unwrap();
    let prefixes: BTreeSet<Vec<FrameKey>> = flows
        .iter()
        .flat_map(|f| {
            let k = f.keys();
            (1..=k.len()).map(move |i| k[..i].to_vec())
        })
        .collect();
    let calls: usize = cold.iter().map(|r| r.reasoner_call_count).sum();
    assert_eq!(calls, prefixes.len(), "{}: calls vs distinct prefixes", m.name);
    assert_eq!(calls, trie.stored_nodes(), "{}: calls vs stored states", m.name);
    let warm = detect_flows(flows, m, &reasoner, &trie).unwrap();
    for (c, w) in cold.iter().zip(&warm) {
        assert_eq!(w.reasoner_call_count, 0, "{}", m.name);
        assert_eq!(c.without_cache_figures(), w.without_cache_figures(), "{}", m.name);
        assert_eq!(c.decision == Decision::Vulnerable, !c.violations.is_empty(), "{}", c.flow_id);
    }
    for f in flows {
        for k in f.keys() {
            assert_eq!(k.to_string().parse::<FrameKey>().unwrap(), k);
        }
        let rec = Recording {
            inner: ReferenceReasoner::new(m, &model),
            seen: Mutex::new(Vec::new()),
        };
        analyze_flow(f, m, &rec, &PrefixTrie::new()).unwrap();
        let seen = rec.seen.into_inner().unwrap();
        assert_eq!(seen.len(), f.frames.len());
        for (i, v) in seen.iter().enumerate() {
            let endpoint = i == 0 || i + 1 == f.frames.len();
            assert_eq!(v.dual, endpoint, "{} frame {i}", f.id);
            assert_eq!(v.ir_text.is_some(), endpoint);
        }
    }
}
