mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use defuse_core::detector::*;
use defuse_core::flows::AnchorCues;
use defuse_core::ir::attach_decompiled;
use defuse_core::*;
use proptest::prelude::*;

const FLAWS: [&str; 7] = ["callchain", "direct", "gcfg", "getenv_strcpy", "oob1", "shared_state2", "two_sinks"];
const SAFE: [&str; 8] = [
    "callchain_guarded",
    "deadcode",
    "direct_guarded",
    "gcfg_guarded",
    "getenv_safe",
    "oob1_guarded",
    "oob1_sanitized",
    "shared_state2_guarded",
];

struct Pipeline {
    facts: FactBase,
    graph: PropagationGraph,
    plain: Vec<FlowObject>,
}

fn pipeline(m: &IrModule) -> Pipeline {
    let facts = extract_facts(m, &SourceSinkModel::default_model());
    let graph = build_graph(&facts);
    let ws = find_witnesses(&graph, &facts, &WitnessBounds::default()).witnesses;
    let plain = build_flows(&ws, &facts);
    Pipeline { facts, graph, plain }
}

/// Plain, enriched and compact variants of every flow.
fn views(p: &Pipeline) -> Vec<(&'static str, Vec<FlowObject>)> {
    let b = WitnessBounds::default();
    let enriched: Vec<FlowObject> = p.plain.iter().map(|f| enrich_flow(f, &p.facts, &p.graph, &b)).collect();
    let compact = enriched.iter().map(compact_view).collect();
    vec![("plain", p.plain.clone()), ("enriched", enriched), ("compact", compact)]
}

fn run(m: &IrModule, flows: &[FlowObject]) -> (Vec<DetectionReport>, PrefixTrie) {
    let r = ReferenceReasoner::new(m, &SourceSinkModel::default_model());
    let trie = PrefixTrie::new();
    let reports = detect_flows(flows, m, &r, &trie).unwrap();
    (reports, trie)
}

fn decision_law(r: &DetectionReport) {
    assert_eq!(r.decision == Decision::Vulnerable, !r.violations.is_empty(), "{}", r.flow_id);
}

#[test]
fn corpus_recall_and_precision() {
    let corpus = support::corpus();
    let names: BTreeSet<&str> = corpus.iter().map(|(n, _)| n.as_str()).collect();
    let listed: BTreeSet<&str> = FLAWS.iter().chain(SAFE.iter()).copied().collect();
    assert_eq!(names, listed, "every corpus module is classified");
    for (name, m) in &corpus {
        let p = pipeline(m);
        let flaw = FLAWS.contains(&name.as_str());
        if flaw {
            assert!(!p.plain.is_empty(), "{name}: flaw without flows");
        }
        for (mode, flows) in views(&p) {
            let (reports, _) = run(m, &flows);
            for r in &reports {
                decision_law(r);
                let want = if flaw { Decision::Vulnerable } else { Decision::Benign };
                assert_eq!(r.decision, want, "{name} {mode}: {:#?}", r.explanation);
            }
        }
    }
}

#[test]
fn oob1_cold_then_warm() {
    let m = support::module("oob1");
    let p = pipeline(&m);
    let r = ReferenceReasoner::new(&m, &SourceSinkModel::default_model());
    let trie = PrefixTrie::new();
    let flow = &p.plain[0];
    let cold = analyze_flow(flow, &m, &r, &trie).unwrap();
    assert_eq!(cold.reasoner_call_count, 2);
    assert_eq!(cold.decision, Decision::Vulnerable);
    assert_eq!(cold.violations.len(), 1);
    let v = &cold.violations[0];
    assert_eq!(v.kind, ViolationKind::OobWrite);
    assert_eq!(v.valid_bounds, None);
    assert_eq!(
        v.taint_chain,
        ["cell:read_len/%buf", "read_len/%v", "global:@g_len", "use_len/%len", "use_len/%idx"]
    );
    let warm = analyze_flow(flow, &m, &r, &trie).unwrap();
    assert_eq!(warm.reasoner_call_count, 0);
    assert_eq!(warm.cache_stats.resumed_depth, 2);
    assert_eq!(warm.without_cache_figures(), cold.without_cache_figures());
}

#[test]
fn oob1_states_follow_the_rule_table() {
    let m = support::module("oob1");
    let p = pipeline(&m);
    let r = ReferenceReasoner::new(&m, &SourceSinkModel::default_model());
    let trie = PrefixTrie::new();
    analyze_flow(&p.plain[0], &m, &r, &trie).unwrap();
    let keys = p.plain[0].keys();
    let states = trie.longest_cached_prefix(&keys);
    let s1 = &states[0];
    assert_eq!(s1.step, 1);
    for q in ["read_len/%v", "global:@g_len"] {
        assert_eq!(s1.tracked_values[q][0], root_marker(&p.plain[0]), "{q}");
        assert!(s1.tracked_values[q][0].starts_with("src.fread@read_len#"));
    }
    assert!(s1.accesses.is_empty());
    let s2 = &states[1];
    let a = &s2.accesses[0];
    assert_eq!(a.operand, "use_len/%idx");
    assert!(!a.extent.is_bounded());
    assert!(s2.constraints.is_empty(), "no guard dominates the sink");
}

#[test]
fn guarded_variants_record_their_bounds() {
    let m = support::module("direct_guarded");
    let p = pipeline(&m);
    let (reports, trie) = run(&m, &p.plain);
    assert_eq!(reports[0].decision, Decision::Benign);
    let s = trie.longest_cached_prefix(&p.plain[0].keys()).pop().unwrap();
    let a = &s.accesses[0];
    assert_eq!(a.extent, Interval::new(Some(0), Some(31)));
    assert_eq!(a.bounds.valid, Some(Interval::new(Some(0), Some(31))));
    assert!(a.feasible);

    let m = support::module("deadcode");
    let p = pipeline(&m);
    let (_, trie) = run(&m, &p.plain);
    let s = trie.longest_cached_prefix(&p.plain[0].keys()).pop().unwrap();
    assert!(s.accesses.iter().all(|a| !a.feasible), "contradictory guards reject the access");
}

#[test]
fn memoization_matches_stored_prefixes_on_corpus() {
    for (name, m) in support::corpus() {
        let p = pipeline(&m);
        for (mode, flows) in views(&p) {
            let (cold, trie) = run(&m, &flows);
            let calls: usize = cold.iter().map(|r| r.reasoner_call_count).sum();
            let distinct: BTreeSet<Vec<FrameKey>> = flows
                .iter()
                .flat_map(|f| {
                    let k = f.keys();
                    (1..=k.len()).map(move |i| k[..i].to_vec())
                })
                .collect();
            assert_eq!(calls, distinct.len(), "{name} {mode}");
            assert_eq!(calls, trie.stored_nodes(), "{name} {mode}");
            let r = ReferenceReasoner::new(&m, &SourceSinkModel::default_model());
            let warm = detect_flows(&flows, &m, &r, &trie).unwrap();
            assert!(warm.iter().all(|r| r.reasoner_call_count == 0));
            for (c, w) in cold.iter().zip(&warm) {
                assert_eq!(c.without_cache_figures(), w.without_cache_figures());
            }
        }
    }
}

/// Records every view it is shown and delegates to the reference reasoner.
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

#[test]
fn dual_view_exactly_on_endpoint_frames() {
    for (name, m) in support::corpus() {
        let p = pipeline(&m);
        for (mode, flows) in views(&p) {
            for f in &flows {
                let rec = Recording {
                    inner: ReferenceReasoner::new(&m, &SourceSinkModel::default_model()),
                    seen: Mutex::new(Vec::new()),
                };
                analyze_flow(f, &m, &rec, &PrefixTrie::new()).unwrap();
                let seen = rec.seen.into_inner().unwrap();
                assert_eq!(seen.len(), f.frames.len());
                for (i, v) in seen.iter().enumerate() {
                    let endpoint = i == 0 || i + 1 == f.frames.len();
                    assert_eq!(v.dual, endpoint, "{name} {mode} frame {i}");
                    assert_eq!(v.ir_text.is_some(), endpoint);
                    assert!(v.decompiled_is_standin, "corpus modules carry no sidecar here");
                }
            }
        }
    }
}

#[test]
fn sidecar_text_replaces_the_standin() {
    let m = support::module("oob1");
    let text = std::fs::read_to_string(support::corpus_dir().join("oob1.decompiled.json")).unwrap();
    let listing: BTreeMap<String, String> = serde_json::from_str(&text).unwrap();
    let (m, _) = attach_decompiled(m, &listing);
    let source = select_view(&FunctionId::new("read_len"), &m, true).unwrap();
    assert!(source.dual && !source.decompiled_is_standin);
    assert!(source.decompiled.contains("fread(&buf"));
    assert!(source.ir_text.as_deref().unwrap().contains("define"));
    let mid = select_view(&FunctionId::new("main"), &m, false).unwrap();
    assert!(!mid.dual && mid.ir_text.is_none());
    let err = select_view(&FunctionId::new("fread"), &m, false).unwrap_err();
    assert!(matches!(err, DetectError::UnknownFunction(_)));
}

#[test]
fn broken_chain_yields_no_violation() {
    let m = support::module("oob1");
    let p = pipeline(&m);
    let (_, trie) = run(&m, &p.plain);
    let flow = &p.plain[0];
    let last = (*trie.longest_cached_prefix(&flow.keys()).pop().unwrap()).clone();
    assert_eq!(verify_path(flow, &last).len(), 1);

    let mut rerooted = last.clone();
    rerooted.tracked_values.get_mut("use_len/%idx").unwrap()[0] = "other@main#0".into();
    assert!(verify_path(flow, &rerooted).is_empty());

    let mut dropped = last.clone();
    dropped.tracked_values.remove("use_len/%idx");
    assert!(verify_path(flow, &dropped).is_empty());

    let mut stale = last;
    stale.step += 1;
    assert!(verify_path(flow, &stale).is_empty(), "only the final step's accesses count");
}

fn violation(object: &str, instr: u32, root: &str) -> Violation {
    Violation {
        sink_function: FunctionId::new("f"),
        sink_instr: InstrId(instr),
        kind: ViolationKind::OobWrite,
        accessed_object: object.into(),
        access_extent: Interval::TOP,
        valid_bounds: None,
        taint_chain: vec![root.into(), "f/%i".into()],
        feasibility_note: String::new(),
    }
}

#[test]
fn dedup_keeps_earliest_per_object_kind_root() {
    assert!(dedup_violations(Vec::new()).is_empty());
    let merged = dedup_violations(vec![violation("f/%a", 9, "r"), violation("f/%a", 4, "r")]);
    assert_eq!(merged.len(), 1);
    assert_eq!(merged[0].sink_instr, InstrId(4));
    let distinct = dedup_violations(vec![violation("f/%a", 9, "r"), violation("f/%b", 4, "r")]);
    assert_eq!(distinct.len(), 2);
    let roots = dedup_violations(vec![violation("f/%a", 9, "r"), violation("f/%a", 4, "s")]);
    assert_eq!(roots.len(), 2);
}

struct Echo;

impl Reasoner for Echo {
    fn step(&self, s: &ReasoningState, v: &FunctionView, a: &AnchorCues) -> Result<ReasoningState, ReasonerFailure> {
        Ok(echo_step(s, v, a))
    }
}

struct Stuck;

impl Reasoner for Stuck {
    fn step(&self, s: &ReasoningState, _: &FunctionView, _: &AnchorCues) -> Result<ReasoningState, ReasonerFailure> {
        Ok(s.clone())
    }
}

struct Forgetful;

impl Reasoner for Forgetful {
    fn step(&self, s: &ReasoningState, _: &FunctionView, _: &AnchorCues) -> Result<ReasoningState, ReasonerFailure> {
        Ok(ReasoningState {
            step: s.step + 1,
            ..s.clone()
        })
    }
}

#[test]
fn echo_reasoner_is_benign_and_contracts_are_enforced() {
    for (name, m) in support::corpus() {
        let p = pipeline(&m);
        for f in &p.plain {
            let r = analyze_flow(f, &m, &Echo, &PrefixTrie::new()).unwrap();
            assert_eq!(r.decision, Decision::Benign, "{name}");
            let stuck = analyze_flow(f, &m, &Stuck, &PrefixTrie::new()).unwrap_err();
            assert!(matches!(stuck, DetectError::StateContractViolation { .. }), "{name}");
            if f.frames.iter().any(|fr| !fr.anchors.propagation_tokens.is_empty()) {
                let e = analyze_flow(f, &m, &Forgetful, &PrefixTrie::new()).unwrap_err();
                assert!(e.to_string().contains("neither tracked nor dismissed"), "{name}: {e}");
            }
        }
    }
}

#[test]
fn reference_reasoner_is_deterministic_and_idle_without_evidence() {
    let m = support::module("oob1");
    let p = pipeline(&m);
    let model = SourceSinkModel::default_model();
    let (a, b) = (ReferenceReasoner::new(&m, &model), ReferenceReasoner::new(&m, &model));
    let flow = &p.plain[0];
    let mut sa = ReasoningState::default();
    let mut sb = ReasoningState::default();
    for (i, frame) in flow.frames.iter().enumerate() {
        let v = select_view(&frame.function, &m, i == 0).unwrap();
        sa = a.step(&sa, &v, &frame.anchors).unwrap();
        sb = b.step(&sb, &v, &frame.anchors).unwrap();
        assert_eq!(sa, sb);
    }
    // `main` neither receives nor produces anything tracked here.
    let quiet = AnchorCues {
        propagation_tokens: Vec::new(),
        provenance_class: Provenance::ContextOnly,
        source_endpoint: None,
        sink_endpoint: None,
    };
    let v = select_view(&FunctionId::new("main"), &m, false).unwrap();
    let empty = a.step(&ReasoningState::default(), &v, &quiet).unwrap();
    assert_eq!(empty.step, 1);
    assert!(empty.tracked_values.is_empty() && empty.accesses.is_empty());
    let again = a.step(&empty, &v, &quiet).unwrap();
    assert_eq!(again.tracked_values, empty.tracked_values);
    assert_eq!(again.value_ranges, empty.value_ranges);
    assert_eq!(again.accesses, empty.accesses);
}

#[test]
fn reports_round_trip_and_ignore_thread_count() {
    for (name, m) in support::corpus() {
        let p = pipeline(&m);
        for (mode, flows) in views(&p) {
            let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
            let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
            let (a, _) = one.install(|| run(&m, &flows));
            let (b, _) = four.install(|| run(&m, &flows));
            let text = reports_to_json(&a);
            assert_eq!(text, reports_to_json(&b), "{name} {mode}");
            let back = reports_from_json(&text).unwrap();
            assert_eq!(back, a);
            assert_eq!(reports_to_json(&back), text);
        }
    }
    assert_eq!(reports_to_json(&[]), "{\"schema\":\"defuse-reports/1\",\"analyzed\":0,\"vulnerable\":0,\"benign\":0,\"reasoner_calls\":0,\"reports\":[]}\n");
    assert!(reports_from_json("{\"schema\":\"defuse-flows/1\",\"reports\":[]}").is_err());
}

#[test]
fn snapshot_of_oob1_states() {
    let m = support::module("oob1");
    let p = pipeline(&m);
    let (_, trie) = run(&m, &p.plain);
    let states: Vec<ReasoningState> =
        trie.longest_cached_prefix(&p.plain[0].keys()).iter().map(|s| (**s).clone()).collect();
    let text = serde_json::to_string_pretty(&states).unwrap() + "\n";
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/oob1.states.json");
    if std::env::var_os("DEFUSE_BLESS").is_some() {
        std::fs::write(&path, &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(&path).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn random_modules_obey_detector_laws(text in support::gen::module_text()) {
        let m = parse_module(&text, &ParseOptions::strict()).unwrap();
        let p = pipeline(&m);
        for (_, flows) in views(&p) {
            let (cold, trie) = run(&m, &flows);
            let calls: usize = cold.iter().map(|r| r.reasoner_call_count).sum();
            prop_assert_eq!(calls, trie.stored_nodes());
            let r = ReferenceReasoner::new(&m, &SourceSinkModel::default_model());
            let warm = detect_flows(&flows, &m, &r, &trie).unwrap();
            for (c, w) in cold.iter().zip(&warm) {
                decision_law(c);
                prop_assert_eq!(w.reasoner_call_count, 0);
                prop_assert_eq!(c.without_cache_figures(), w.without_cache_figures());
                for v in &c.violations {
                    prop_assert!(!v.taint_chain.is_empty());
                    prop_assert_eq!(v.taint_chain.last().unwrap().split('/').next().unwrap(), v.sink_function.as_str());
                }
            }
        }
    }
}

#[test]
fn corpus_detector_invariants() {
    for (_, m) in support::corpus() {
        let s = support::invariants::slice(&m, &WitnessBounds::default());
        for flows in s.variants() {
            support::invariants::check_detector(&m, &flows);
        }
    }
}
