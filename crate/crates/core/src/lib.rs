//! Factuality scoring and refinement for summaries of long narratives.
//!
//! The pipeline builds a character knowledge graph from scene-segmented text,
//! drafts a summary by hierarchical merging, splits the draft into atomic
//! facts, verifies each against retrieved scenes and graph triples, and
//! feeds the failures back to rewrite the draft.

use serde::{Deserialize, Serialize};

pub mod app;
pub mod ckg;
pub mod corpus;
pub mod error;
pub mod evalharness;
mod exec;
pub mod factscore;
pub mod prompts;
pub mod provider;
pub mod refine;
pub mod retrieval;
pub mod summarize;

pub use error::{Error, Result};

/// Non-fatal observation recorded alongside a result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub stage: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            stage: stage.into(),
            message: message.into(),
        }
    }
}
