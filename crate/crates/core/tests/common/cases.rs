//! Random case generators and their checks, shared by the property suites
//! and the acceptance runner.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use narrafact_core::ckg::{
    build_names_graph, linearize, parse_linearized, select_edges, AliasPair, CharacterKG, Triple,
};
use narrafact_core::corpus::{chunk_scenes, Narrative};
use narrafact_core::evalharness::{
    kendall_tau, permutation_pvalue, spearman, ScorePairSeries, Statistic,
};
use narrafact_core::provider::{hashed_embedding, lexical_terms, Gateway, Script, ScriptedBackend};
use narrafact_core::retrieval::{candidate_triples, RetrievalBackend, Retriever};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use super::{
    alias_components, edge_oracle, exact_pvalue, kendall_oracle, spearman_oracle, EdgeTable,
};

type Check = Result<(), TestCaseError>;

/// Runs `check` over `cases` generated inputs; the error names the first failure.
pub fn run_cases<S: Strategy>(
    cases: u32,
    strategy: S,
    check: impl Fn(S::Value) -> Check,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, check).map_err(|e| e.to_string())
}

// Graph construction.

const PREDICATES: [&str; 8] = [
    "fear",
    "Fear",
    "ally of",
    "ally  of",
    "guided by",
    "own, Ring",
    "pursue",
    "enemy of",
];

fn name(i: usize, variant: u8) -> String {
    match variant % 3 {
        0 => format!("Char{i}"),
        1 => format!("char{i}"),
        _ => format!("C{i} Alt"),
    }
}

fn actual_table(g: &CharacterKG) -> EdgeTable {
    g.edges
        .iter()
        .map(|e| {
            (
                (e.subject.clone(), e.object.clone()),
                e.predicates
                    .iter()
                    .map(|p| (p.predicate.clone(), p.freq, p.first_scene))
                    .collect(),
            )
        })
        .collect()
}

pub type GraphCase = (Vec<AliasPair>, Vec<Triple>, usize);

prop_compose! {
    /// Up to 10 characters, 8 predicate spellings, 5 rounds and tau in 1..=5.
    pub fn graph_case()(chars in 1usize..=10, rounds in 1usize..=5)
        (chars in Just(chars),
         tau in 1usize..=5,
         aliases in prop::collection::vec((0..chars, 0..chars, any::<u8>(), any::<u8>(), 0usize..4), 0..12),
         triples in prop::collection::vec(
             (0..chars + 1, any::<u8>(), 0usize..8, prop::option::of((0..chars + 1, any::<u8>())), 0usize..6, 0..rounds),
             0..60))
        -> GraphCase
    {
        let mut pairs: Vec<AliasPair> = (0..chars).map(|i| AliasPair::single(name(i, 0), i % 4)).collect();
        for (a, b, va, vb, scene) in aliases {
            pairs.push(AliasPair::new(name(a, va), name(b, vb), scene));
        }
        // Index `chars` stands for a name outside the names graph.
        let who = |i: usize, v: u8| if i == chars { "Stranger".to_string() } else { name(i, v) };
        let triples = triples
            .into_iter()
            .map(|(s, vs, p, o, scene, round)| Triple {
                subject: who(s, vs),
                predicate: PREDICATES[p].to_string(),
                object: o.map(|(o, vo)| who(o, vo)),
                scene_index: scene,
                round,
            })
            .collect();
        (pairs, triples, tau)
    }
}

pub fn check_edges((pairs, triples, tau): GraphCase) -> Check {
    let names = build_names_graph(&pairs);
    let graph = select_edges(&triples, &names, tau).unwrap();
    prop_assert_eq!(actual_table(&graph), edge_oracle(&triples, &names, tau));
    for e in &graph.edges {
        prop_assert!(e.predicates.iter().all(|p| p.freq >= tau));
    }
    Ok(())
}

pub fn check_linearize_round_trip((pairs, triples, tau): GraphCase) -> Check {
    let names = build_names_graph(&pairs);
    let graph = select_edges(&triples, &names, tau).unwrap();
    let parsed = parse_linearized(&linearize(&graph)).unwrap();
    let from_text: BTreeSet<(String, String, Vec<String>)> = parsed
        .into_iter()
        .map(|(s, o, p)| (s.clone(), o.unwrap_or(s), p))
        .collect();
    let from_graph: BTreeSet<(String, String, Vec<String>)> = graph
        .edges
        .iter()
        .map(|e| {
            (
                e.subject.clone(),
                e.object.clone(),
                e.predicates.iter().map(|p| p.predicate.clone()).collect(),
            )
        })
        .collect();
    prop_assert_eq!(from_text, from_graph);
    Ok(())
}

pub fn alias_case() -> impl Strategy<Value = Vec<AliasPair>> {
    prop::collection::vec(
        (0usize..12, 0usize..12, any::<u8>(), any::<u8>(), 0usize..5),
        0..40,
    )
    .prop_map(|raw| {
        raw.into_iter()
            .map(|(a, b, va, vb, s)| AliasPair::new(name(a, va), name(b, vb), s))
            .collect()
    })
}

pub fn check_names_graph(pairs: Vec<AliasPair>) -> Check {
    let g = build_names_graph(&pairs);
    let got: BTreeSet<BTreeSet<String>> = g
        .clusters
        .iter()
        .map(|c| c.aliases.iter().map(|a| a.to_lowercase()).collect())
        .collect();
    prop_assert_eq!(got, alias_components(&pairs));
    for c in &g.clusters {
        prop_assert_eq!(&c.canonical_key, &c.aliases[0]);
        prop_assert_eq!(c.display.clone(), c.aliases.join(" / "));
    }
    Ok(())
}

// Retrieval.

const EPS: f64 = 1e-12;
const WORDS: [&str; 8] = [
    "ring", "frodo", "shire", "dark", "road", "sam", "gate", "fire",
];
const NAMES: [&str; 4] = ["Frodo", "Sam", "Gandalf", "Sauron"];
const RETRIEVAL_PREDICATES: [&str; 5] = ["fear", "follow", "guard", "carry ring", "pursue"];

fn dense_cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
    let na: f64 = a.iter().map(|p| p * p).sum();
    let nb: f64 = b.iter().map(|q| q * q).sum();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

fn lexical_cos(a: &str, b: &str) -> f64 {
    let count = |t: &str| {
        let mut m: BTreeMap<String, f64> = BTreeMap::new();
        for w in lexical_terms(t) {
            *m.entry(w).or_default() += 1.0;
        }
        m
    };
    let (x, y) = (count(a), count(b));
    let dot: f64 = x
        .iter()
        .map(|(t, c)| c * y.get(t).copied().unwrap_or(0.0))
        .sum();
    let na: f64 = x.values().map(|c| c * c).sum();
    let nb: f64 = y.values().map(|c| c * c).sum();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Independent scorer mirroring what each backend should compute.
struct Oracle {
    backend: RetrievalBackend,
    table: HashMap<String, Vec<f64>>,
}

impl Oracle {
    fn score(&self, a: &str, b: &str) -> f64 {
        match self.backend {
            RetrievalBackend::Lexical => lexical_cos(a, b),
            RetrievalBackend::Embedding => {
                let v = |t: &str| {
                    self.table
                        .get(t)
                        .cloned()
                        .unwrap_or_else(|| hashed_embedding(t).unwrap())
                };
                dense_cos(&v(a), &v(b))
            }
        }
    }
}

fn sentence(ws: &[usize]) -> String {
    ws.iter().map(|&w| WORDS[w]).collect::<Vec<_>>().join(" ")
}

pub fn retrieval_graph(raw: &[(usize, usize, Option<usize>)]) -> CharacterKG {
    let pairs: Vec<AliasPair> = NAMES.iter().map(|n| AliasPair::single(*n, 0)).collect();
    let names = build_names_graph(&pairs);
    let triples: Vec<Triple> = raw
        .iter()
        .enumerate()
        .map(|(i, &(s, p, o))| {
            Triple::new(
                NAMES[s],
                RETRIEVAL_PREDICATES[p],
                o.map(|o| NAMES[o]),
                i % 3,
                0,
            )
        })
        .collect();
    select_edges(&triples, &names, 1).unwrap()
}

pub type RetrievalCase = (
    Vec<String>,
    String,
    Vec<(usize, usize, Option<usize>)>,
    usize,
    HashMap<String, Vec<f64>>,
);

pub fn retrieval_case() -> impl Strategy<Value = RetrievalCase> {
    (
        prop::collection::vec(prop::collection::vec(0usize..WORDS.len(), 1..6), 1..8),
        prop::collection::vec(0usize..WORDS.len(), 1..5),
        prop::collection::vec((0usize..4, 0usize..5, prop::option::of(0usize..4)), 1..12),
        1usize..6,
        prop::collection::vec(prop::collection::vec(-2i32..=2, 4), 16),
    )
        .prop_map(|(scenes, fact, triples, k, vecs)| {
            let scenes: Vec<String> = scenes.iter().map(|s| sentence(s)).collect();
            let fact = sentence(&fact);
            // Small integer vectors make exact ties common.
            let mut table = HashMap::new();
            for (i, text) in scenes.iter().chain(std::iter::once(&fact)).enumerate() {
                table.insert(
                    text.clone(),
                    vecs[i % vecs.len()].iter().map(|&x| x as f64).collect(),
                );
            }
            (scenes, fact, triples, k, table)
        })
}

pub fn check_retrieval(
    backend: RetrievalBackend,
    (scenes, fact, raw, k, table): RetrievalCase,
) -> Check {
    let narrative = Narrative::from_texts("p", "p", scenes.clone()).unwrap();
    let script = Script {
        embeddings: table.clone(),
        ..Script::default()
    };
    let gateway = Gateway::scripted(ScriptedBackend::new(script));
    let retriever = Retriever::new(&gateway, backend);
    let oracle = Oracle { backend, table };

    // Scene: exhaustive scan, first index among the maxima.
    let scores: Vec<f64> = scenes.iter().map(|s| oracle.score(&fact, s)).collect();
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let expected = scores.iter().position(|&s| s >= best - EPS).unwrap();
    let (got, got_score) = retriever.top_scene(&fact, &narrative).unwrap();
    prop_assert!((got_score - best).abs() <= EPS);
    if got != expected {
        // Only a float-level near tie between distinct texts may flip the pick.
        prop_assert!((scores[got] - scores[expected]).abs() <= EPS);
        prop_assert_ne!(&scenes[got], &scenes[expected]);
    }

    // Triples: score every candidate, sort, keep k.
    let graph = retrieval_graph(&raw);
    let mut all: Vec<(f64, String)> = candidate_triples(&graph)
        .into_iter()
        .map(|t| (oracle.score(&fact, &t.rendering), t.rendering))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let top = retriever.top_triples(&fact, &graph, k).unwrap();
    prop_assert_eq!(top.len(), k.min(all.len()));
    for (t, (score, _)) in top.iter().zip(&all) {
        prop_assert!((t.score - score).abs() <= EPS);
    }
    for w in top.windows(2) {
        prop_assert!(w[0].score >= w[1].score);
        if w[0].score == w[1].score {
            prop_assert!(w[0].rendering < w[1].rendering);
        }
    }
    // Everything clearly above the cut must be present.
    if let Some(last) = top.last() {
        for (score, rendering) in &all {
            if *score > last.score + EPS {
                prop_assert!(top.iter().any(|t| &t.rendering == rendering));
            }
        }
    }
    Ok(())
}

// Chunking.

pub fn scene_text(i: usize, tokens: usize) -> String {
    (0..tokens)
        .map(|t| format!("s{i}t{t}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn chunk_case() -> impl Strategy<Value = (Vec<usize>, usize)> {
    (
        prop::collection::vec(1usize..1500, 1..=20),
        prop::sample::select(vec![64usize, 256, 1024]),
    )
}

pub fn check_chunks((sizes, budget): (Vec<usize>, usize)) -> Check {
    let texts: Vec<String> = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| scene_text(i, n))
        .collect();
    let narrative = Narrative::from_texts("n", "n", texts).unwrap();
    let chunks = chunk_scenes(&narrative, budget).unwrap();

    let flat: Vec<usize> = chunks
        .iter()
        .flat_map(|c| c.scene_indices.clone())
        .collect();
    prop_assert_eq!(flat, (0..sizes.len()).collect::<Vec<_>>());

    for (i, c) in chunks.iter().enumerate() {
        prop_assert_eq!(c.index, i);
        prop_assert!(!c.scene_indices.is_empty());
        let tokens: usize = c.scene_indices.iter().map(|&s| sizes[s]).sum();
        prop_assert_eq!(c.token_count, tokens);
        if c.scene_indices.len() > 1 {
            prop_assert!(tokens <= budget);
        } else {
            // A lone scene may only exceed the budget by itself.
            prop_assert!(tokens <= budget || sizes[c.scene_indices[0]] > budget);
        }
    }
    // Greedy packing: the next scene would not have fit.
    for w in chunks.windows(2) {
        let next = sizes[w[1].scene_indices[0]];
        prop_assert!(w[0].token_count + next > budget);
    }
    Ok(())
}

// Statistics.

pub fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

/// Short integer-valued columns so ties show up often.
pub fn tied_columns() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=10).prop_flat_map(|n| {
        (
            prop::collection::vec((0i32..5).prop_map(f64::from), n),
            prop::collection::vec((0i32..5).prop_map(f64::from), n),
        )
    })
}

pub fn check_kendall((x, y): (Vec<f64>, Vec<f64>)) -> Check {
    prop_assume!(!is_constant(&x) && !is_constant(&y));
    let s = ScorePairSeries::from_values(&x, &y).unwrap();
    prop_assert!((kendall_tau(&s).unwrap() - kendall_oracle(&x, &y)).abs() <= 1e-12);
    Ok(())
}

pub fn check_spearman((x, y): (Vec<f64>, Vec<f64>)) -> Check {
    prop_assume!(!is_constant(&x) && !is_constant(&y));
    let s = ScorePairSeries::from_values(&x, &y).unwrap();
    prop_assert!((spearman(&s).unwrap() - spearman_oracle(&x, &y)).abs() <= 1e-9);
    Ok(())
}

pub fn small_columns() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..=6).prop_flat_map(|n| {
        (
            prop::collection::vec((0i32..4).prop_map(f64::from), n),
            prop::collection::vec((0i32..4).prop_map(f64::from), n),
        )
    })
}

pub fn check_exact_pvalue((x, y): (Vec<f64>, Vec<f64>)) -> Check {
    prop_assume!(!is_constant(&x) && !is_constant(&y));
    let s = ScorePairSeries::from_values(&x, &y).unwrap();
    let p = permutation_pvalue(&s, Statistic::Kendall, 10_000, 1).unwrap();
    prop_assert!((p - exact_pvalue(&x, &y, kendall_oracle)).abs() <= 1e-12);
    let p = permutation_pvalue(&s, Statistic::Spearman, 10_000, 1).unwrap();
    prop_assert!((p - exact_pvalue(&x, &y, spearman_oracle)).abs() <= 1e-12);
    Ok(())
}
