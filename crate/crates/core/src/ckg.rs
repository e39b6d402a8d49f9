//! Character knowledge graph construction.
//!
//! Each scene is sent through the extraction prompt once per sampling round.
//! Name variants from every round are unioned into a [`NamesGraph`]; triples
//! are canonicalized through it and a predicate survives as an edge label
//! only when its frequency for the (subject, object) pair reaches `tau`.
//! Predicates on an edge are kept in order of first appearance in the story.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Narrative, Scene};
use crate::error::{Error, Result};
use crate::exec::map_ordered;
use crate::prompts;
use crate::provider::{ChatRequest, Gateway};

pub const DEFAULT_ROUNDS: usize = 3;
pub const EXTRACTION_TEMPERATURE: f64 = 0.7;
pub const TAG_EXTRACTION: &str = "triple_extraction";

/// Majority threshold for a given number of sampling rounds.
pub fn default_tau(rounds: usize) -> usize {
    rounds.div_ceil(2).max(1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub predicate: String,
    /// `None` marks a state of the subject (self-loop).
    pub object: Option<String>,
    pub scene_index: usize,
    pub round: usize,
}

impl Triple {
    pub fn new(
        subject: impl Into<String>,
        predicate: impl Into<String>,
        object: Option<&str>,
        scene_index: usize,
        round: usize,
    ) -> Self {
        Self {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.map(str::to_owned),
            scene_index,
            round,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasPair {
    pub left: String,
    pub right: String,
    pub scene_index: usize,
}

impl AliasPair {
    pub fn new(left: impl Into<String>, right: impl Into<String>, scene_index: usize) -> Self {
        Self {
            left: left.into(),
            right: right.into(),
            scene_index,
        }
    }

    /// A name with no alias: registers a singleton cluster.
    pub fn single(name: impl Into<String>, scene_index: usize) -> Self {
        let name = name.into();
        Self::new(name.clone(), name, scene_index)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneExtraction {
    pub alias_pairs: Vec<AliasPair>,
    pub triples: Vec<Triple>,
    /// Lines in the edge block that did not fit the grammar.
    pub skipped_lines: usize,
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub(crate) fn name_key(name: &str) -> String {
    collapse_ws(name).to_lowercase()
}

/// Identity used for frequency counting: case-insensitive, whitespace
/// collapsed, commas dropped so that linearized lists stay parseable.
pub fn predicate_key(predicate: &str) -> String {
    collapse_ws(&predicate.replace(',', " ")).to_lowercase()
}

fn predicate_display(predicate: &str) -> String {
    collapse_ws(&predicate.replace(',', " "))
}

#[derive(Clone, Copy, PartialEq)]
enum Block {
    Preamble,
    Entities,
    Edges,
}

fn header_of(line: &str) -> Option<Block> {
    let cleaned = line
        .trim()
        .trim_matches(|c: char| c == '*' || c == '#' || c == '_')
        .trim()
        .to_lowercase();
    if cleaned.starts_with("named entities") {
        Some(Block::Entities)
    } else if cleaned.starts_with("knowledge graph edges") {
        Some(Block::Edges)
    } else {
        None
    }
}

fn strip_numbering(line: &str) -> Option<&str> {
    let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits == 0 {
        return None;
    }
    let rest = &line[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    Some(rest.trim())
}

fn split_list(field: &str) -> Vec<String> {
    field
        .split(',')
        .map(collapse_ws)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Parses one edge line `N. subj[, subj2]; predicate[; object[, object2]]`.
fn parse_edge_line(line: &str, scene_index: usize, round: usize) -> Option<Vec<Triple>> {
    let body = strip_numbering(line.trim())?;
    let fields: Vec<&str> = body.split(';').map(str::trim).collect();
    let (subjects, predicate, objects) = match fields.as_slice() {
        [s, p] => (split_list(s), collapse_ws(p), Vec::new()),
        [s, p, o] => (split_list(s), collapse_ws(p), split_list(o)),
        _ => return None,
    };
    if subjects.is_empty() || predicate.is_empty() {
        return None;
    }
    let mut out = Vec::new();
    for s in &subjects {
        if objects.is_empty() {
            out.push(Triple::new(
                s.clone(),
                predicate.clone(),
                None,
                scene_index,
                round,
            ));
        }
        for o in &objects {
            out.push(Triple::new(
                s.clone(),
                predicate.clone(),
                Some(o),
                scene_index,
                round,
            ));
        }
    }
    Some(out)
}

fn parse_entity_line(line: &str, scene_index: usize) -> Vec<AliasPair> {
    let mut body = line.trim();
    for bullet in ["- ", "* ", "• "] {
        if let Some(rest) = body.strip_prefix(bullet) {
            body = rest;
        }
    }
    if let Some(rest) = strip_numbering(body) {
        body = rest;
    }
    let names: Vec<String> = body
        .split('/')
        .map(collapse_ws)
        .filter(|n| !n.is_empty() && n != "...")
        .collect();
    match names.len() {
        0 => Vec::new(),
        1 => vec![AliasPair::single(names[0].clone(), scene_index)],
        _ => {
            let mut pairs = Vec::new();
            for i in 0..names.len() {
                for j in i + 1..names.len() {
                    pairs.push(AliasPair::new(
                        names[i].clone(),
                        names[j].clone(),
                        scene_index,
                    ));
                }
            }
            pairs
        }
    }
}

/// Parses an extraction response into alias pairs and triples.
pub fn parse_extraction(response: &str, scene_index: usize, round: usize) -> SceneExtraction {
    let mut out = SceneExtraction::default();
    let mut block = Block::Preamble;
    for line in response.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed == "..." || trimmed.starts_with('[') {
            continue;
        }
        if let Some(b) = header_of(trimmed) {
            block = b;
            continue;
        }
        match block {
            Block::Entities => out
                .alias_pairs
                .extend(parse_entity_line(trimmed, scene_index)),
            Block::Edges => match parse_edge_line(trimmed, scene_index, round) {
                Some(triples) => out.triples.extend(triples),
                None => out.skipped_lines += 1,
            },
            // Tolerate responses that omit the headers but keep numbered edges.
            Block::Preamble => {
                if let Some(triples) = parse_edge_line(trimmed, scene_index, round) {
                    out.triples.extend(triples);
                }
            }
        }
    }
    out
}

pub fn extract_scene_triples(
    gateway: &Gateway,
    scene: &Scene,
    round: usize,
    temperature: f64,
) -> Result<SceneExtraction> {
    let tag = format!("{TAG_EXTRACTION} round {round} scene {}", scene.index);
    let request = ChatRequest::new(
        tag.clone(),
        prompts::knowledge_extraction(&scene.text),
        temperature,
    )?;
    let response = gateway.chat_complete(&request)?;
    if response.trim().is_empty() {
        return Err(Error::EmptyResponse { tag });
    }
    let extraction = parse_extraction(&response, scene.index, round);
    if extraction.skipped_lines > 0 {
        tracing::debug!(
            scene = scene.index,
            round,
            skipped = extraction.skipped_lines,
            "unparsed edge lines"
        );
    }
    Ok(extraction)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameCluster {
    /// First-occurring alias; the node identifier in the graph.
    pub canonical_key: String,
    /// Aliases joined by " / " in first-occurrence order.
    pub display: String,
    pub aliases: Vec<String>,
    pub first_scene: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamesGraph {
    pub clusters: Vec<NameCluster>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl NamesGraph {
    pub fn from_clusters(clusters: Vec<NameCluster>) -> Self {
        let mut g = Self {
            clusters,
            index: HashMap::new(),
        };
        g.reindex();
        g
    }

    fn reindex(&mut self) {
        self.index = self
            .clusters
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.aliases.iter().map(move |a| (name_key(a), i)))
            .collect();
    }

    pub fn resolve(&self, name: &str) -> Option<&NameCluster> {
        self.index.get(&name_key(name)).map(|&i| &self.clusters[i])
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new() -> Self {
        Self { parent: Vec::new() }
    }

    fn add(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// The smaller root wins, so the root is always the earliest-seen name.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Connected components over alias links. Pairs are taken in scene order
/// (stable within a scene), which fixes which alias is "first".
pub fn build_names_graph(pairs: &[AliasPair]) -> NamesGraph {
    let mut ordered: Vec<&AliasPair> = pairs.iter().collect();
    ordered.sort_by_key(|p| p.scene_index);

    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut surface: Vec<(String, usize)> = Vec::new();
    let mut sets = DisjointSet::new();
    let mut intern = |name: &str, scene: usize, sets: &mut DisjointSet| -> usize {
        let key = name_key(name);
        *ids.entry(key).or_insert_with(|| {
            surface.push((collapse_ws(name), scene));
            sets.add()
        })
    };
    for p in ordered {
        if name_key(&p.left).is_empty() || name_key(&p.right).is_empty() {
            continue;
        }
        let a = intern(&p.left, p.scene_index, &mut sets);
        let b = intern(&p.right, p.scene_index, &mut sets);
        sets.union(a, b);
    }

    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for id in 0..surface.len() {
        let root = sets.find(id);
        by_root.entry(root).or_default().push(id);
    }
    let clusters = by_root
        .into_values()
        .map(|members| {
            let aliases: Vec<String> = members.iter().map(|&m| surface[m].0.clone()).collect();
            NameCluster {
                canonical_key: aliases[0].clone(),
                display: aliases.join(" / "),
                first_scene: members.iter().map(|&m| surface[m].1).min().unwrap_or(0),
                aliases,
            }
        })
        .collect();
    NamesGraph::from_clusters(clusters)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateStat {
    pub predicate: String,
    pub freq: usize,
    pub first_scene: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub subject: String,
    /// Equal to `subject` for self-loop states.
    pub object: String,
    /// Ordered by first scene, then by predicate key.
    pub predicates: Vec<PredicateStat>,
}

impl Edge {
    pub fn is_self_loop(&self) -> bool {
        self.subject == self.object
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub rounds: usize,
    pub scenes: usize,
    pub raw_triples: usize,
    pub dropped_unknown: usize,
    pub skipped_lines: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterKG {
    pub clusters: Vec<NameCluster>,
    pub nodes: Vec<String>,
    pub tau: usize,
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub stats: BuildStats,
}

impl CharacterKG {
    pub fn empty() -> Self {
        Self {
            clusters: Vec::new(),
            nodes: Vec::new(),
            tau: 1,
            edges: Vec::new(),
            stats: BuildStats::default(),
        }
    }

    pub fn names(&self) -> NamesGraph {
        NamesGraph::from_clusters(self.clusters.clone())
    }

    pub fn edge(&self, subject: &str, object: &str) -> Option<&Edge> {
        self.edges
            .iter()
            .find(|e| e.subject == subject && e.object == object)
    }

    pub fn predicate_count(&self) -> usize {
        self.edges.iter().map(|e| e.predicates.len()).sum()
    }

    /// (first scene, key) ordering used for subjects and objects.
    fn node_order(&self) -> HashMap<&str, (usize, &str)> {
        self.clusters
            .iter()
            .map(|c| {
                (
                    c.canonical_key.as_str(),
                    (c.first_scene, c.canonical_key.as_str()),
                )
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    /// Graph restricted to the given (subject, object, predicate key) labels.
    pub fn subgraph<'a, I>(&self, labels: I) -> CharacterKG
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut keep: HashMap<(&str, &str), Vec<String>> = HashMap::new();
        for (s, o, p) in labels {
            keep.entry((s, o)).or_default().push(predicate_key(p));
        }
        let edges = self
            .edges
            .iter()
            .filter_map(|e| {
                let wanted = keep.get(&(e.subject.as_str(), e.object.as_str()))?;
                let predicates: Vec<_> = e
                    .predicates
                    .iter()
                    .filter(|p| wanted.contains(&predicate_key(&p.predicate)))
                    .cloned()
                    .collect();
                (!predicates.is_empty()).then(|| Edge {
                    subject: e.subject.clone(),
                    object: e.object.clone(),
                    predicates,
                })
            })
            .collect();
        CharacterKG {
            clusters: self.clusters.clone(),
            nodes: self.nodes.clone(),
            tau: self.tau,
            edges,
            stats: BuildStats::default(),
        }
    }
}

struct Tally {
    display: String,
    freq: usize,
    first_scene: usize,
    first_at: (usize, usize, usize),
}

/// Canonicalizes triples through `names` and keeps every predicate whose
/// frequency for its (subject, object) pair is at least `tau`.
pub fn select_edges(triples: &[Triple], names: &NamesGraph, tau: usize) -> Result<CharacterKG> {
    if tau == 0 {
        return Err(Error::InvalidParams("tau must be at least 1".into()));
    }
    let mut tallies: BTreeMap<(String, String, String), Tally> = BTreeMap::new();
    let mut dropped = 0;
    for (position, t) in triples.iter().enumerate() {
        let Some(subject) = names.resolve(&t.subject) else {
            dropped += 1;
            continue;
        };
        let object = match &t.object {
            None => subject,
            Some(o) => match names.resolve(o) {
                Some(c) => c,
                None => {
                    dropped += 1;
                    continue;
                }
            },
        };
        let key = predicate_key(&t.predicate);
        if key.is_empty() {
            dropped += 1;
            continue;
        }
        let at = (t.scene_index, t.round, position);
        let entry = tallies
            .entry((
                subject.canonical_key.clone(),
                object.canonical_key.clone(),
                key,
            ))
            .or_insert_with(|| Tally {
                display: predicate_display(&t.predicate),
                freq: 0,
                first_scene: t.scene_index,
                first_at: at,
            });
        entry.freq += 1;
        entry.first_scene = entry.first_scene.min(t.scene_index);
        if at < entry.first_at {
            entry.first_at = at;
            entry.display = predicate_display(&t.predicate);
        }
    }

    let mut grouped: BTreeMap<(String, String), Vec<(String, PredicateStat)>> = BTreeMap::new();
    for ((s, o, key), tally) in tallies {
        if tally.freq >= tau {
            grouped.entry((s, o)).or_default().push((
                key,
                PredicateStat {
                    predicate: tally.display,
                    freq: tally.freq,
                    first_scene: tally.first_scene,
                },
            ));
        }
    }
    let edges = grouped
        .into_iter()
        .map(|((subject, object), mut preds)| {
            preds.sort_by(|a, b| (a.1.first_scene, &a.0).cmp(&(b.1.first_scene, &b.0)));
            Edge {
                subject,
                object,
                predicates: preds.into_iter().map(|(_, p)| p).collect(),
            }
        })
        .collect();

    Ok(CharacterKG {
        clusters: names.clusters.clone(),
        nodes: names
            .clusters
            .iter()
            .map(|c| c.canonical_key.clone())
            .collect(),
        tau,
        edges,
        stats: BuildStats {
            raw_triples: triples.len(),
            dropped_unknown: dropped,
            ..BuildStats::default()
        },
    })
}

/// Runs extraction for every scene in each of `rounds` rounds and reduces the
/// samples into a graph.
pub fn build_ckg(
    gateway: &Gateway,
    narrative: &Narrative,
    rounds: usize,
    tau: usize,
    temperature: f64,
) -> Result<CharacterKG> {
    if rounds == 0 {
        return Err(Error::InvalidParams("rounds must be at least 1".into()));
    }
    let jobs: Vec<(usize, &Scene)> = (0..rounds)
        .flat_map(|r| narrative.scenes.iter().map(move |s| (r, s)))
        .collect();
    let extractions = map_ordered(gateway.workers(), &jobs, |(round, scene)| {
        extract_scene_triples(gateway, scene, *round, temperature)
    })?;

    let mut pairs = Vec::new();
    let mut triples = Vec::new();
    let mut skipped = 0;
    for e in extractions {
        pairs.extend(e.alias_pairs);
        triples.extend(e.triples);
        skipped += e.skipped_lines;
    }
    let names = build_names_graph(&pairs);
    let mut graph = select_edges(&triples, &names, tau)?;
    graph.stats.rounds = rounds;
    graph.stats.scenes = narrative.scene_count();
    graph.stats.skipped_lines = skipped;
    Ok(graph)
}

const SUBJECT_TAG: &str = "<subject>";
const OBJECT_TAG: &str = "<object>";
const PREDICATE_TAG: &str = "<predicate>";
const OBJECT_INDENT: &str = "  ";
const PREDICATE_INDENT: &str = "    ";

/// Text rendering of the graph:
///
/// ```text
/// <subject>NAME
///     <predicate>state1, state2        (self-loop states, if any)
///   <object>NAME
///     <predicate>p1, p2
/// ```
///
/// Subjects and objects are ordered by first scene, then name; predicates
/// keep their temporal order. Subjects without edges are omitted.
pub fn linearize(graph: &CharacterKG) -> String {
    let order = graph.node_order();
    let rank = |name: &str| order.get(name).copied().unwrap_or((usize::MAX, ""));
    let mut by_subject: BTreeMap<(usize, String), Vec<&Edge>> = BTreeMap::new();
    for e in &graph.edges {
        let (scene, _) = rank(&e.subject);
        by_subject
            .entry((scene, e.subject.clone()))
            .or_default()
            .push(e);
    }
    let mut out = String::new();
    for ((_, subject), mut edges) in by_subject {
        edges.sort_by(|a, b| {
            let (sa, sb) = (rank(&a.object).0, rank(&b.object).0);
            (sa, &a.object).cmp(&(sb, &b.object))
        });
        out.push_str(SUBJECT_TAG);
        out.push_str(&subject);
        out.push('\n');
        let joined = |e: &Edge| {
            e.predicates
                .iter()
                .map(|p| p.predicate.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        };
        if let Some(own) = edges.iter().find(|e| e.is_self_loop()) {
            out.push_str(&format!(
                "{PREDICATE_INDENT}{PREDICATE_TAG}{}\n",
                joined(own)
            ));
        }
        for e in edges.iter().filter(|e| !e.is_self_loop()) {
            out.push_str(&format!("{OBJECT_INDENT}{OBJECT_TAG}{}\n", e.object));
            out.push_str(&format!("{PREDICATE_INDENT}{PREDICATE_TAG}{}\n", joined(e)));
        }
    }
    out
}

/// One parsed block of linearized text: `(subject, object or None for
/// states, predicates in order)`.
pub type LinearizedEdge = (String, Option<String>, Vec<String>);

/// Inverse of [`linearize`].
pub fn parse_linearized(text: &str) -> Result<Vec<LinearizedEdge>> {
    let mut out = Vec::new();
    let mut subject: Option<String> = None;
    let mut object: Option<String> = None;
    for (n, line) in text.lines().enumerate() {
        let body = line.trim_start();
        if let Some(name) = body.strip_prefix(SUBJECT_TAG) {
            subject = Some(name.to_string());
            object = None;
        } else if let Some(name) = body.strip_prefix(OBJECT_TAG) {
            object = Some(name.to_string());
        } else if let Some(preds) = body.strip_prefix(PREDICATE_TAG) {
            let s = subject.clone().ok_or_else(|| {
                Error::MalformedInput(format!("line {}: predicate before subject", n + 1))
            })?;
            let list = preds.split(", ").map(str::to_owned).collect();
            out.push((s, object.take(), list));
        } else if !body.is_empty() {
            return Err(Error::MalformedInput(format!(
                "line {}: unrecognized `{line}`",
                n + 1
            )));
        }
    }
    Ok(out)
}
