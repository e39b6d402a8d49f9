//! Atomic-fact decomposition, evidence-grounded verification, and the
//! factual-fraction score with per-fact feedback.

use serde::{Deserialize, Serialize};

use crate::ckg::{linearize, CharacterKG};
use crate::corpus::Narrative;
use crate::error::{Error, Result};
use crate::exec::map_ordered;
use crate::prompts;
use crate::provider::{ChatRequest, Gateway};
use crate::retrieval::{RetrievedEvidence, Retriever, DEFAULT_TOP_K};
use crate::summarize::SummaryDraft;
use crate::Diagnostic;

pub const TAG_DECOMPOSE: &str = "decompose";
pub const TAG_VERIFY: &str = "verify";
pub const JUDGE_TEMPERATURE: f64 = 0.0;
const EMPTY_JUDGE_FEEDBACK: &str = "(the judge returned an empty response)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicFact {
    /// 1-based position within the report.
    pub index: usize,
    pub text: String,
    pub source_sentence: usize,
    pub source_chunk: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactVerdict {
    pub fact: AtomicFact,
    pub factual: bool,
    /// Present exactly when `factual` is false.
    pub feedback: Option<String>,
    pub evidence: RetrievedEvidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactScoreReport {
    pub score: f64,
    pub factual_count: usize,
    pub z: usize,
    pub iteration: usize,
    pub verdicts: Vec<FactVerdict>,
    #[serde(default)]
    pub diagnostics: Vec<Diagnostic>,
}

impl FactScoreReport {
    pub fn new(
        verdicts: Vec<FactVerdict>,
        iteration: usize,
        diagnostics: Vec<Diagnostic>,
    ) -> Result<Self> {
        let z = verdicts.len();
        if z == 0 {
            return Err(Error::NoFacts);
        }
        let factual_count = verdicts.iter().filter(|v| v.factual).count();
        Ok(Self {
            score: factual_count as f64 / z as f64,
            factual_count,
            z,
            iteration,
            verdicts,
            diagnostics,
        })
    }

    pub fn flagged(&self) -> impl Iterator<Item = &FactVerdict> {
        self.verdicts.iter().filter(|v| !v.factual)
    }

    pub fn is_perfect(&self) -> bool {
        self.factual_count == self.z
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Total parse of a judge response: a first line of exactly `1` (after
/// trimming) means factual; anything else is feedback.
pub fn parse_verdict(response: &str) -> (bool, Option<String>) {
    let trimmed = response.trim();
    if trimmed.lines().next().map(str::trim) == Some("1") {
        return (true, None);
    }
    let feedback = if trimmed.is_empty() {
        EMPTY_JUDGE_FEEDBACK.to_string()
    } else {
        trimmed.to_string()
    };
    (false, Some(feedback))
}

fn clean_fact_line(line: &str) -> &str {
    let mut s = line.trim();
    for bullet in ["- ", "* ", "• "] {
        if let Some(rest) = s.strip_prefix(bullet) {
            s = rest.trim_start();
        }
    }
    if let Some(rest) = s.strip_prefix('[') {
        if let Some(close) = rest.find(']') {
            if rest[..close].chars().all(|c| c.is_ascii_digit()) && close > 0 {
                s = rest[close + 1..].trim_start();
            }
        }
    }
    let digits = s.len() - s.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &s[digits..];
        if let Some(r) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            s = r.trim_start();
        }
    }
    s.trim()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decomposition {
    pub facts: Vec<AtomicFact>,
    pub diagnostics: Vec<Diagnostic>,
}

/// One decomposition call per draft sentence; facts are the non-blank lines.
pub fn decompose_facts(gateway: &Gateway, draft: &SummaryDraft) -> Result<Decomposition> {
    if draft.sentences.is_empty() {
        return Err(Error::InvalidInput("draft has no sentences".into()));
    }
    let indexed: Vec<(usize, &crate::summarize::DraftSentence)> =
        draft.sentences.iter().enumerate().collect();
    let responses = map_ordered(gateway.workers(), &indexed, |(i, s)| {
        let request = ChatRequest::new(
            format!("{TAG_DECOMPOSE} sentence {i}"),
            prompts::atomic_facts(&s.text),
            JUDGE_TEMPERATURE,
        )?;
        gateway.chat_complete(&request)
    })?;

    let mut facts = Vec::new();
    let mut diagnostics = Vec::new();
    for ((i, sentence), response) in indexed.iter().zip(responses) {
        let before = facts.len();
        for line in response.lines() {
            let text = clean_fact_line(line);
            if !text.is_empty() {
                facts.push(AtomicFact {
                    index: facts.len() + 1,
                    text: text.to_string(),
                    source_sentence: *i,
                    source_chunk: sentence.chunk,
                });
            }
        }
        if facts.len() == before {
            diagnostics.push(Diagnostic::new(
                "decompose",
                format!("sentence {i} produced no atomic facts and was dropped"),
            ));
        }
    }
    if facts.is_empty() {
        return Err(Error::NoFacts);
    }
    Ok(Decomposition { facts, diagnostics })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringOptions {
    pub top_k: usize,
    /// When false the judge sees only the scene.
    pub use_graph: bool,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            use_graph: true,
        }
    }
}

pub fn verify_fact(
    gateway: &Gateway,
    retriever: &Retriever<'_>,
    fact: &AtomicFact,
    narrative: &Narrative,
    graph: Option<&CharacterKG>,
    top_k: usize,
) -> Result<FactVerdict> {
    let evidence = retriever.evidence(&fact.text, narrative, graph, top_k)?;
    let scene = &narrative.scenes[evidence.scene_index].text;
    let subgraph = graph.map(|g| {
        linearize(&g.subgraph(evidence.triples.iter().map(|t| {
            (
                t.subject.as_str(),
                t.object.as_deref().unwrap_or(t.subject.as_str()),
                t.predicate.as_str(),
            )
        })))
    });
    let request = ChatRequest::new(
        format!("{TAG_VERIFY} fact {}", fact.index),
        prompts::fact_check(scene, subgraph.as_deref().map(str::trim_end), &fact.text),
        JUDGE_TEMPERATURE,
    )?;
    let response = gateway.chat_complete(&request)?;
    let (factual, feedback) = parse_verdict(&response);
    Ok(FactVerdict {
        fact: fact.clone(),
        factual,
        feedback,
        evidence,
    })
}

pub fn verify_all(
    gateway: &Gateway,
    retriever: &Retriever<'_>,
    facts: &[AtomicFact],
    narrative: &Narrative,
    graph: Option<&CharacterKG>,
    top_k: usize,
) -> Result<Vec<FactVerdict>> {
    map_ordered(gateway.workers(), facts, |f| {
        verify_fact(gateway, retriever, f, narrative, graph, top_k)
    })
}

pub fn score_summary(
    gateway: &Gateway,
    retriever: &Retriever<'_>,
    draft: &SummaryDraft,
    narrative: &Narrative,
    graph: Option<&CharacterKG>,
    options: ScoringOptions,
) -> Result<FactScoreReport> {
    let decomposition = decompose_facts(gateway, draft)?;
    let graph = graph.filter(|_| options.use_graph);
    let verdicts = verify_all(
        gateway,
        retriever,
        &decomposition.facts,
        narrative,
        graph,
        options.top_k,
    )?;
    FactScoreReport::new(verdicts, draft.iteration, decomposition.diagnostics)
}
