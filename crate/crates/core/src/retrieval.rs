//! Evidence retrieval for atomic facts: the single most similar scene plus the
//! top-k graph triples.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::ckg::CharacterKG;
use crate::corpus::Narrative;
use crate::error::{Error, Result};
use crate::provider::{digest, lexical_terms, Gateway};

pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalBackend {
    /// Cosine over provider embeddings.
    #[default]
    Embedding,
    /// Cosine over term-count vectors.
    Lexical,
}

#[derive(Debug, Clone, PartialEq)]
enum Vector {
    Dense(Vec<f64>),
    Terms(BTreeMap<String, f64>),
}

fn term_counts(text: &str) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    for t in lexical_terms(text) {
        *counts.entry(t).or_insert(0.0) += 1.0;
    }
    counts
}

fn cosine(a: &Vector, b: &Vector) -> f64 {
    let (dot, na, nb) = match (a, b) {
        (Vector::Dense(x), Vector::Dense(y)) => {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let na: f64 = x.iter().map(|p| p * p).sum();
            let nb: f64 = y.iter().map(|q| q * q).sum();
            (dot, na, nb)
        }
        (Vector::Terms(x), Vector::Terms(y)) => {
            let dot: f64 = x.iter().filter_map(|(t, c)| y.get(t).map(|d| c * d)).sum();
            let na: f64 = x.values().map(|c| c * c).sum();
            let nb: f64 = y.values().map(|c| c * c).sum();
            (dot, na, nb)
        }
        _ => unreachable!("vectors from one retriever share a backend"),
    };
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriple {
    pub subject: String,
    pub predicate: String,
    pub object: Option<String>,
    /// "subject predicate object", or "subject predicate" for states.
    pub rendering: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedEvidence {
    pub scene_index: usize,
    pub scene_score: f64,
    pub triples: Vec<ScoredTriple>,
}

/// Every edge predicate as a retrievable triple, in graph order.
pub fn candidate_triples(graph: &CharacterKG) -> Vec<ScoredTriple> {
    let mut out = Vec::new();
    for e in &graph.edges {
        for p in &e.predicates {
            let (object, rendering) = if e.is_self_loop() {
                (None, format!("{} {}", e.subject, p.predicate))
            } else {
                (
                    Some(e.object.clone()),
                    format!("{} {} {}", e.subject, p.predicate, e.object),
                )
            };
            out.push(ScoredTriple {
                subject: e.subject.clone(),
                predicate: p.predicate.clone(),
                object,
                rendering,
                score: 0.0,
            });
        }
    }
    out
}

/// Descending score, then ascending rendering.
pub fn rank_order(a: &ScoredTriple, b: &ScoredTriple) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.rendering.cmp(&b.rendering))
}

pub struct Retriever<'g> {
    gateway: &'g Gateway,
    backend: RetrievalBackend,
    cache: RwLock<HashMap<String, Arc<Vector>>>,
}

impl<'g> Retriever<'g> {
    pub fn new(gateway: &'g Gateway, backend: RetrievalBackend) -> Self {
        Self {
            gateway,
            backend,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn backend(&self) -> RetrievalBackend {
        self.backend
    }

    fn vector(&self, text: &str) -> Result<Arc<Vector>> {
        if text.trim().is_empty() {
            return Err(Error::EmptyInput);
        }
        let key = digest(text);
        if let Some(v) = self.cache.read().expect("cache poisoned").get(&key) {
            return Ok(Arc::clone(v));
        }
        let v = Arc::new(match self.backend {
            RetrievalBackend::Embedding => Vector::Dense(self.gateway.embed(text)?),
            RetrievalBackend::Lexical => Vector::Terms(term_counts(text)),
        });
        self.cache
            .write()
            .expect("cache poisoned")
            .entry(key)
            .or_insert_with(|| Arc::clone(&v));
        Ok(v)
    }

    /// Cosine similarity in [-1, 1].
    pub fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        Ok(cosine(&*self.vector(a)?, &*self.vector(b)?))
    }

    /// Most similar scene; ties go to the lowest index.
    pub fn top_scene(&self, fact: &str, narrative: &Narrative) -> Result<(usize, f64)> {
        let query = self.vector(fact)?;
        let mut best: Option<(usize, f64)> = None;
        for scene in &narrative.scenes {
            let score = cosine(&query, &*self.vector(&scene.text)?);
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((scene.index, score));
            }
        }
        best.ok_or(Error::EmptyInput)
    }

    pub fn top_triples(
        &self,
        fact: &str,
        graph: &CharacterKG,
        k: usize,
    ) -> Result<Vec<ScoredTriple>> {
        let query = self.vector(fact)?;
        let mut candidates = candidate_triples(graph);
        for c in &mut candidates {
            c.score = cosine(&query, &*self.vector(&c.rendering)?);
        }
        candidates.sort_by(rank_order);
        candidates.truncate(k);
        Ok(candidates)
    }

    pub fn evidence(
        &self,
        fact: &str,
        narrative: &Narrative,
        graph: Option<&CharacterKG>,
        k: usize,
    ) -> Result<RetrievedEvidence> {
        let (scene_index, scene_score) = self.top_scene(fact, narrative)?;
        let triples = match graph {
            Some(g) => self.top_triples(fact, g, k)?,
            None => Vec::new(),
        };
        Ok(RetrievedEvidence {
            scene_index,
            scene_score,
            triples,
        })
    }
}
