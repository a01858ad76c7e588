use defuse_bench::{call_chain, corpus};
use defuse_core::*;

#[test]
fn generated_chains_carry_one_witness() {
    let model = SourceSinkModel::default_model();
    for depth in [2, 4, 6] {
        let m = parse_module(&call_chain(depth), &ParseOptions::strict()).unwrap();
        let f = extract_facts(&m, &model);
        let g = build_graph(&f);
        let bounds = WitnessBounds { max_path_edges: depth + 2, ..WitnessBounds::default() };
        let ws = find_witnesses(&g, &f, &bounds).witnesses;
        assert_eq!(ws.len(), 1, "depth {depth}");
        assert_eq!(ws[0].frames.len(), depth + 2);
    }
}

#[test]
fn corpus_loads() {
    assert!(corpus().len() >= 12);
}
