mod common;

use common::cases::{
    alias_case, check_edges, check_linearize_round_trip, check_names_graph, graph_case,
};
use common::{fixture, kg_inputs};
use narrafact_core::ckg::{build_names_graph, linearize, select_edges, AliasPair, Triple};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn select_edges_matches_frequency_oracle(c in graph_case()) {
        check_edges(c)?;
    }

    #[test]
    fn names_graph_matches_union_find(pairs in alias_case()) {
        check_names_graph(pairs)?;
    }

    #[test]
    fn linearized_text_round_trips(c in graph_case()) {
        check_linearize_round_trip(c)?;
    }
}

#[test]
fn fixture_graph_linearizes_to_golden_text() {
    let inputs = kg_inputs();
    let names = build_names_graph(&inputs.alias_pairs);
    let graph = select_edges(&inputs.triples, &names, inputs.tau).unwrap();
    let golden = std::fs::read_to_string(fixture("kg_linearized.txt")).unwrap();
    assert_eq!(linearize(&graph), golden);
    assert_eq!(graph.nodes, ["Frodo", "Gandalf", "Sauron"]);
    assert_eq!(graph.clusters[0].display, "Frodo / Frodo Baggins");
}

#[test]
fn threshold_keeps_only_recurring_predicates() {
    let names = build_names_graph(&[
        AliasPair::single("Frodo", 0),
        AliasPair::single("Sauron", 0),
    ]);
    let t = |p: &str, round| Triple::new("Frodo", p, Some("Sauron"), 0, round);
    let triples = [t("fear", 0), t("fear", 1), t("fear", 2), t("hate", 0)];
    let g = select_edges(&triples, &names, 2).unwrap();
    let preds: Vec<_> = g.edges[0]
        .predicates
        .iter()
        .map(|p| p.predicate.as_str())
        .collect();
    assert_eq!(preds, ["fear"]);
    let g = select_edges(&triples, &names, 4).unwrap();
    assert!(g.edges.is_empty());
}
