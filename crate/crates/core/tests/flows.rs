mod support;

use defuse_core::flows::{flows_from_json, flows_to_json, Provenance};
use defuse_core::{compact_view, parse_module, FlowObject, IrModule, ParseOptions, WitnessBounds};
use proptest::prelude::*;
use support::invariants::{check_flow_invariants, slice as run};

fn fixture(stem: &str) -> IrModule {
    let path = format!("{}/tests/fixtures/{stem}.ll", env!("CARGO_MANIFEST_DIR"));
    parse_module(&std::fs::read_to_string(path).unwrap(), &ParseOptions::strict().named(stem)).unwrap()
}

fn key_strings(f: &FlowObject) -> Vec<String> {
    f.keys().iter().map(ToString::to_string).collect()
}

#[test]
fn corpus_flow_invariants() {
    let bounds = WitnessBounds::default();
    for (_, m) in support::corpus() {
        check_flow_invariants(&run(&m, &bounds), &bounds);
    }
}

#[test]
fn corpus_labels() {
    let bounds = WitnessBounds::default();
    let expect = [
        ("oob1", vec!["read_len:@:global:@g_len", "use_len:@:%idx"]),
        ("gcfg", vec!["init_hdr:@:global:@g_width", "get_row:@:%xi"]),
        ("direct", vec!["fill:@:%ci"]),
    ];
    for (stem, keys) in expect {
        let r = run(&support::module(stem), &bounds);
        assert_eq!(key_strings(&r.flows[0]), keys, "{stem}");
    }
}

#[test]
fn enrichment_fixture() {
    let bounds = WitnessBounds::default();
    let r = run(&fixture("enrich"), &bounds);
    assert_eq!(r.flows.len(), 1);
    let e = &r.enriched[0];
    assert_eq!(
        key_strings(e),
        [
            "read_len:@:global:@g_len",
            "check_hdr:@:%h",
            "main:@:%r",
            "reset_len:@:global:@g_len",
            "use_len:@:%idx"
        ]
    );
    let prov: Vec<_> = e.frames.iter().map(|f| f.provenance).collect();
    assert_eq!(
        prov,
        [
            Provenance::Witness,
            Provenance::DefuseProven,
            Provenance::ContextOnly,
            Provenance::GlobalProven,
            Provenance::Witness
        ]
    );
    assert_eq!(compact_view(e).frames.len(), 4);
    check_flow_invariants(&r, &bounds);
}

#[test]
fn flows_json_round_trips_on_corpus() {
    let bounds = WitnessBounds::default();
    for (name, m) in support::corpus() {
        let r = run(&m, &bounds);
        for set in [&r.flows, &r.enriched] {
            let text = flows_to_json(set);
            let back = flows_from_json(&text).unwrap();
            assert_eq!(&back, set, "{name}");
            assert_eq!(flows_to_json(&back), text, "{name}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn random_flow_invariants(text in support::gen::module_text()) {
        let m = parse_module(&text, &ParseOptions::strict()).unwrap();
        let bounds = WitnessBounds { max_path_edges: 3, max_local_expansion_steps: 100_000, ..WitnessBounds::default() };
        check_flow_invariants(&run(&m, &bounds), &bounds);
    }
}
