//! Hierarchical merging: summarize each scene chunk, then fold the chunk
//! summaries left to right into the initial draft.

use serde::{Deserialize, Serialize};

use crate::corpus::{chunk_scenes, Chunk, Narrative};
use crate::error::{Error, Result};
use crate::exec::map_ordered;
use crate::prompts;
use crate::provider::{ChatRequest, Gateway};
use crate::Diagnostic;

pub const TAG_SUMMARIZE: &str = "summarize_chunk";
pub const TAG_RECOMPRESS: &str = "recompress";
pub const SUMMARY_TEMPERATURE: f64 = 0.0;
pub const MIN_CHUNK_SENTENCES: usize = 2;
pub const MAX_CHUNK_SENTENCES: usize = 5;

/// Splits after `.`, `!` or `?` when followed by whitespace. Abbreviations
/// such as "Mrs. March" are split too.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(_, next)) = chars.peek() {
                if next.is_whitespace() {
                    let end = i + c.len_utf8();
                    push_sentence(&mut out, &text[start..end]);
                    start = end;
                }
            }
        }
    }
    push_sentence(&mut out, &text[start..]);
    out
}

fn push_sentence(out: &mut Vec<String>, raw: &str) {
    let s = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    if !s.is_empty() {
        out.push(s);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DraftSentence {
    pub text: String,
    /// Source chunk, unknown for refined or recompressed drafts.
    pub chunk: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryDraft {
    pub id: String,
    pub iteration: usize,
    /// Sentences joined by single spaces.
    pub text: String,
    pub sentences: Vec<DraftSentence>,
    pub lineage: Option<String>,
}

impl SummaryDraft {
    fn assemble(iteration: usize, sentences: Vec<DraftSentence>, lineage: Option<String>) -> Self {
        let text = sentences
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        Self {
            id: format!("draft-{iteration}"),
            iteration,
            text,
            sentences,
            lineage,
        }
    }

    /// Draft with unknown provenance, e.g. a model rewrite.
    pub fn from_text(iteration: usize, text: &str, lineage: Option<String>) -> Self {
        let sentences = split_sentences(text)
            .into_iter()
            .map(|text| DraftSentence { text, chunk: None })
            .collect();
        Self::assemble(iteration, sentences, lineage)
    }

    /// Successor of `self` carrying `text`.
    pub fn revise(&self, text: &str) -> Self {
        Self::from_text(self.iteration + 1, text, Some(self.id.clone()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    #[default]
    Concat,
    /// Concatenate, then summarize the concatenation once more.
    Recompress,
}

pub fn summarize_chunk(gateway: &Gateway, chunk: &Chunk) -> Result<String> {
    if chunk.text.trim().is_empty() {
        return Err(Error::InvalidInput(format!(
            "chunk {} is empty",
            chunk.index
        )));
    }
    let request = ChatRequest::new(
        format!("{TAG_SUMMARIZE} {}", chunk.index),
        prompts::chunk_summary(&chunk.text),
        SUMMARY_TEMPERATURE,
    )?;
    gateway.chat_complete(&request)
}

/// Left fold by concatenation; each sentence remembers its chunk.
pub fn merge_summaries(chunk_summaries: &[String]) -> Result<SummaryDraft> {
    if chunk_summaries.is_empty() {
        return Err(Error::InvalidInput("no chunk summaries to merge".into()));
    }
    let sentences: Vec<DraftSentence> = chunk_summaries
        .iter()
        .enumerate()
        .flat_map(|(chunk, s)| {
            split_sentences(s)
                .into_iter()
                .map(move |text| DraftSentence {
                    text,
                    chunk: Some(chunk),
                })
        })
        .collect();
    if sentences.is_empty() {
        return Err(Error::InvalidInput("all chunk summaries are empty".into()));
    }
    Ok(SummaryDraft::assemble(0, sentences, None))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryOutcome {
    pub draft: SummaryDraft,
    pub chunk_count: usize,
    pub diagnostics: Vec<Diagnostic>,
}

pub fn hierarchical_summary(
    gateway: &Gateway,
    narrative: &Narrative,
    budget: usize,
    mode: MergeMode,
) -> Result<SummaryOutcome> {
    let chunks = chunk_scenes(narrative, budget)?;
    let summaries = map_ordered(gateway.workers(), &chunks, |c| summarize_chunk(gateway, c))?;

    let mut diagnostics = Vec::new();
    for (i, s) in summaries.iter().enumerate() {
        let n = split_sentences(s).len();
        if !(MIN_CHUNK_SENTENCES..=MAX_CHUNK_SENTENCES).contains(&n) {
            diagnostics.push(Diagnostic::new(
                "summarize",
                format!("chunk {i} summary has {n} sentences (asked for {MIN_CHUNK_SENTENCES}-{MAX_CHUNK_SENTENCES})"),
            ));
        }
    }

    let mut draft = merge_summaries(&summaries)?;
    if mode == MergeMode::Recompress {
        let merged = Chunk {
            index: 0,
            scene_indices: Vec::new(),
            text: draft.text.clone(),
            token_count: 0,
            token_start: None,
        };
        let request = ChatRequest::new(
            TAG_RECOMPRESS,
            prompts::chunk_summary(&merged.text),
            SUMMARY_TEMPERATURE,
        )?;
        let text = gateway.chat_complete(&request)?;
        draft = SummaryDraft::from_text(0, &text, None);
    }
    Ok(SummaryOutcome {
        draft,
        chunk_count: chunks.len(),
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::ScriptedBackend;

    #[test]
    fn sentence_splitter() {
        assert_eq!(split_sentences("A. B! C? D"), ["A.", "B!", "C?", "D"]);
        assert_eq!(split_sentences("v1.2 is out."), ["v1.2 is out."]);
        assert!(split_sentences("  ").is_empty());
    }

    #[test]
    fn merge_examples() {
        let d = merge_summaries(&["A.".into()]).unwrap();
        assert_eq!(d.text, "A.");
        assert!(d.sentences.iter().all(|s| s.chunk == Some(0)));

        let d = merge_summaries(&["A.".into(), "B.".into()]).unwrap();
        assert_eq!(d.text, "A. B.");
        let prov: Vec<_> = d.sentences.iter().map(|s| s.chunk.unwrap()).collect();
        assert_eq!(prov, [0, 1]);
        assert_eq!(d.iteration, 0);

        let d = merge_summaries(&["a1. a2.".into(), "b1. b2.".into(), "c1. c2.".into()]).unwrap();
        let prov: Vec<_> = d.sentences.iter().map(|s| s.chunk.unwrap()).collect();
        assert_eq!(prov, [0, 0, 1, 1, 2, 2]);

        assert!(matches!(merge_summaries(&[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn empty_chunk_is_invalid() {
        let gw = Gateway::scripted(ScriptedBackend::from_queue(["x"]));
        let chunk = Chunk {
            index: 0,
            scene_indices: vec![],
            text: " ".into(),
            token_count: 0,
            token_start: None,
        };
        assert!(matches!(
            summarize_chunk(&gw, &chunk),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn scripted_chunk_summary_is_verbatim() {
        let gw = Gateway::scripted(ScriptedBackend::from_queue(["Frodo leaves the Shire."]));
        let n = Narrative::from_texts("n", "t", ["Frodo packs and walks away."]).unwrap();
        let out = hierarchical_summary(&gw, &n, 1024, MergeMode::Concat).unwrap();
        assert_eq!(out.draft.text, "Frodo leaves the Shire.");
        assert_eq!(gw.calls_tagged(TAG_SUMMARIZE), 1);
        // One sentence is below the requested range.
        assert_eq!(out.diagnostics.len(), 1);
    }

    #[test]
    fn six_sentence_summary_is_flagged_not_rejected() {
        let gw = Gateway::scripted(ScriptedBackend::from_queue(["A. B. C. D. E. F."]));
        let n = Narrative::from_texts("n", "t", ["scene"]).unwrap();
        let out = hierarchical_summary(&gw, &n, 1024, MergeMode::Concat).unwrap();
        assert_eq!(out.draft.sentences.len(), 6);
        assert!(out.diagnostics[0].message.contains("6 sentences"));
    }

    #[test]
    fn recompress_loses_provenance() {
        let gw = Gateway::scripted(ScriptedBackend::from_queue(["A. B.", "Short."]));
        let n = Narrative::from_texts("n", "t", ["scene"]).unwrap();
        let out = hierarchical_summary(&gw, &n, 1024, MergeMode::Recompress).unwrap();
        assert_eq!(out.draft.text, "Short.");
        assert_eq!(out.draft.sentences[0].chunk, None);
        assert_eq!(gw.calls_tagged(TAG_RECOMPRESS), 1);
    }
}
