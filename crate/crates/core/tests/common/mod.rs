//! Brute-force oracles and fixture helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use narrafact_core::ckg::{AliasPair, NamesGraph, Triple};
use narrafact_core::corpus::{parse_scene_json, Narrative};
use narrafact_core::provider::Script;
use serde::Deserialize;

pub mod cases;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(rel)
}

pub fn fixture_narrative(name: &str) -> Narrative {
    parse_scene_json(&std::fs::read_to_string(fixture(&format!("{name}/narrative.json"))).unwrap())
        .unwrap()
}

pub fn fixture_script(name: &str) -> Script {
    Script::load(fixture(&format!("{name}/script.json"))).unwrap()
}

#[derive(Deserialize)]
pub struct GraphInputs {
    pub tau: usize,
    pub alias_pairs: Vec<AliasPair>,
    pub triples: Vec<Triple>,
}

pub fn kg_inputs() -> GraphInputs {
    serde_json::from_str(&std::fs::read_to_string(fixture("kg_inputs.json")).unwrap()).unwrap()
}

fn squash(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Expected edges as (subject, object) -> [(predicate, freq, first_scene)].
pub type EdgeTable = BTreeMap<(String, String), Vec<(String, usize, usize)>>;

/// Frequency filter by exhaustive counting: every distinct
/// (subject, object, predicate) label is counted by a full scan.
pub fn edge_oracle(triples: &[Triple], names: &NamesGraph, tau: usize) -> EdgeTable {
    let label = |t: &Triple| -> Option<(String, String, String)> {
        let s = names.resolve(&t.subject)?.canonical_key.clone();
        let o = match &t.object {
            None => s.clone(),
            Some(o) => names.resolve(o)?.canonical_key.clone(),
        };
        let p = squash(&t.predicate.replace(',', " ")).to_lowercase();
        (!p.is_empty()).then_some((s, o, p))
    };
    let labels: Vec<Option<(String, String, String)>> = triples.iter().map(label).collect();
    let distinct: BTreeSet<&(String, String, String)> = labels.iter().flatten().collect();

    let mut table: EdgeTable = BTreeMap::new();
    for l in distinct {
        let hits: Vec<usize> = (0..triples.len())
            .filter(|&i| labels[i].as_ref() == Some(l))
            .collect();
        if hits.len() < tau {
            continue;
        }
        let first_scene = hits.iter().map(|&i| triples[i].scene_index).min().unwrap();
        let earliest = *hits
            .iter()
            .min_by_key(|&&i| (triples[i].scene_index, triples[i].round, i))
            .unwrap();
        let display = squash(&triples[earliest].predicate.replace(',', " "));
        table.entry((l.0.clone(), l.1.clone())).or_default().push((
            display,
            hits.len(),
            first_scene,
        ));
    }
    for preds in table.values_mut() {
        preds.sort_by_key(|p| (p.2, p.0.to_lowercase()));
    }
    table
}

/// Connected components of alias pairs by a plain quick-union over
/// lowercase, whitespace-collapsed keys.
pub fn alias_components(pairs: &[AliasPair]) -> BTreeSet<BTreeSet<String>> {
    let key = |s: &str| squash(s).to_lowercase();
    let mut names: Vec<String> = Vec::new();
    let mut parent: Vec<usize> = Vec::new();
    let id = |n: &str, names: &mut Vec<String>, parent: &mut Vec<usize>| -> usize {
        let k = key(n);
        match names.iter().position(|x| *x == k) {
            Some(i) => i,
            None => {
                names.push(k);
                parent.push(parent.len());
                parent.len() - 1
            }
        }
    };
    fn root(parent: &[usize], mut x: usize) -> usize {
        while parent[x] != x {
            x = parent[x];
        }
        x
    }
    for p in pairs {
        if key(&p.left).is_empty() || key(&p.right).is_empty() {
            continue;
        }
        let a = id(&p.left, &mut names, &mut parent);
        let b = id(&p.right, &mut names, &mut parent);
        let (ra, rb) = (root(&parent, a), root(&parent, b));
        parent[ra] = rb;
    }
    let mut groups: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    for (i, n) in names.iter().enumerate() {
        groups
            .entry(root(&parent, i))
            .or_default()
            .insert(n.clone());
    }
    groups.into_values().collect()
}

/// Tau-b by direct pair counting.
pub fn kendall_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if i >= j {
                continue;
            }
            let a = (x[i] - x[j]).signum() * if x[i] == x[j] { 0.0 } else { 1.0 };
            let b = (y[i] - y[j]).signum() * if y[i] == y[j] { 0.0 } else { 1.0 };
            if a == 0.0 {
                tx += 1.0;
            }
            if b == 0.0 {
                ty += 1.0;
            }
            if a * b > 0.0 {
                c += 1.0;
            } else if a * b < 0.0 {
                d += 1.0;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as f64;
    (c - d) / ((n0 - tx) * (n0 - ty)).sqrt()
}

/// Average ranks by counting smaller and equal values.
pub fn rank_oracle(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let less = v.iter().filter(|&&b| b < a).count() as f64;
            let equal = v.iter().filter(|&&b| b == a).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    pearson_oracle(&rank_oracle(x), &rank_oracle(y))
}

/// All orderings of `0..n` by recursive insertion.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Exact two-sided permutation probability over every ordering of `y`.
pub fn exact_pvalue(x: &[f64], y: &[f64], stat: fn(&[f64], &[f64]) -> f64) -> f64 {
    let observed = stat(x, y).abs();
    let perms = all_permutations(y.len());
    let hits = perms
        .iter()
        .filter(|p| {
            let shuffled: Vec<f64> = p.iter().map(|&i| y[i]).collect();
            stat(x, &shuffled).abs() >= observed - 1e-12
        })
        .count();
    hits as f64 / perms.len() as f64
}

/// LCS length by enumerating index subsequences of the shorter sequence.
pub fn lcs_oracle(a: &[&str], b: &[&str]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let sub: Vec<&str> = (0..short.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| short[i])
            .collect();
        let mut it = long.iter();
        if sub.iter().all(|s| it.any(|l| l == s)) {
            best = best.max(sub.len());
        }
    }
    best
}
