//! Stage-by-stage runs over one narrative: persisted records, the action
//! driver shared by the CLI and the HTTP service, and report exports.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ckg::{default_tau, CharacterKG, DEFAULT_ROUNDS, EXTRACTION_TEMPERATURE};
use crate::corpus::DEFAULT_CHUNK_BUDGET;
use crate::error::{Error, Result};
use crate::factscore::{FactScoreReport, ScoringOptions};
use crate::provider::{
    Gateway, RemoteBackend, RemoteConfig, Script, ScriptedBackend, Transcript, TranscriptMode,
};
use crate::refine::{
    RefineOptions, RefinementStep, DEFAULT_CONTEXT_BUDGET, DEFAULT_MAX_ITERATIONS,
};
use crate::retrieval::{RetrievalBackend, DEFAULT_TOP_K};
use crate::summarize::{MergeMode, SummaryDraft};
use crate::Diagnostic;

mod pipeline;
pub mod service;
pub mod store;

pub use pipeline::App;
pub use store::RunStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub rounds: usize,
    pub tau: usize,
    pub extraction_temperature: f64,
    pub chunk_budget: usize,
    pub merge_mode: MergeMode,
    pub retrieval: RetrievalBackend,
    pub top_k: usize,
    pub use_graph: bool,
    pub max_iterations: usize,
    pub context_budget: usize,
    pub full_narrative: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rounds: DEFAULT_ROUNDS,
            tau: default_tau(DEFAULT_ROUNDS),
            extraction_temperature: EXTRACTION_TEMPERATURE,
            chunk_budget: DEFAULT_CHUNK_BUDGET,
            merge_mode: MergeMode::Concat,
            retrieval: RetrievalBackend::Embedding,
            top_k: DEFAULT_TOP_K,
            use_graph: true,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            context_budget: DEFAULT_CONTEXT_BUDGET,
            full_narrative: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidParams("rounds must be at least 1".into()));
        }
        if self.tau == 0 || self.tau > self.rounds {
            return Err(Error::InvalidParams(format!(
                "tau must be in 1..={}, got {}",
                self.rounds, self.tau
            )));
        }
        if self.chunk_budget == 0 || self.top_k == 0 || self.context_budget == 0 {
            return Err(Error::InvalidParams(
                "chunk_budget, top_k and context_budget must be positive".into(),
            ));
        }
        if !(0.0..=2.0).contains(&self.extraction_temperature) {
            return Err(Error::InvalidParams(
                "extraction_temperature must be in [0, 2]".into(),
            ));
        }
        Ok(())
    }

    pub fn scoring(&self) -> ScoringOptions {
        ScoringOptions {
            top_k: self.top_k,
            use_graph: self.use_graph,
        }
    }

    pub fn refine_options(&self) -> RefineOptions {
        RefineOptions {
            max_iterations: self.max_iterations,
            context_budget: self.context_budget,
            full_narrative: self.full_narrative,
            scoring: self.scoring(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStage {
    Loaded,
    GraphBuilt,
    Summarized,
    Scored,
    Refined,
}

impl fmt::Display for RunStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RunStage::Loaded => "loaded",
            RunStage::GraphBuilt => "graph_built",
            RunStage::Summarized => "summarized",
            RunStage::Scored => "scored",
            RunStage::Refined => "refined",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    BuildGraph,
    Summarize,
    Score,
    Refine,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::BuildGraph => "build_graph",
            Action::Summarize => "summarize",
            Action::Score => "score",
            Action::Refine => "refine",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "build_graph" => Ok(Action::BuildGraph),
            "summarize" => Ok(Action::Summarize),
            "score" => Ok(Action::Score),
            "refine" => Ok(Action::Refine),
            other => Err(Error::InvalidInput(format!("unknown action {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub action: Action,
    pub status: JobStatus,
    pub error: Option<String>,
    pub submitted_at: String,
    pub finished_at: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportKind {
    ScoreJson,
    GraphJson,
    TextSummary,
}

impl FromStr for ExportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "score_json" => Ok(ExportKind::ScoreJson),
            "graph_json" => Ok(ExportKind::GraphJson),
            "text_summary" => Ok(ExportKind::TextSummary),
            other => Err(Error::InvalidInput(format!(
                "unknown export kind {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub narrative_ref: String,
    pub stage: RunStage,
    pub config: PipelineConfig,
    pub graph: Option<CharacterKG>,
    /// `drafts[i]` is scored by `reports[i]`; refinement step `k` produced `drafts[k + 1]`.
    pub drafts: Vec<SummaryDraft>,
    pub reports: Vec<FactScoreReport>,
    pub steps: Vec<RefinementStep>,
    pub jobs: Vec<JobRecord>,
    /// Successful actions so far; numbers the provider transcripts.
    pub actions_applied: usize,
    pub diagnostics: Vec<Diagnostic>,
    pub last_error: Option<String>,
    pub created_at: String,
    pub updated_at: String,
}

impl RunRecord {
    pub fn latest_draft(&self) -> Option<&SummaryDraft> {
        self.drafts.last()
    }

    pub fn latest_report(&self) -> Option<&FactScoreReport> {
        self.reports.last()
    }

    pub fn job(&self, job_id: &str) -> Option<&JobRecord> {
        self.jobs.iter().find(|j| j.job_id == job_id)
    }

    /// Whether `action` may run now.
    pub fn check(&self, action: Action) -> Result<()> {
        let legal = match action {
            Action::BuildGraph => self.stage == RunStage::Loaded,
            Action::Summarize => self.stage == RunStage::GraphBuilt,
            Action::Score => self.stage >= RunStage::Summarized,
            Action::Refine => {
                self.stage >= RunStage::Scored && self.steps.len() < self.config.max_iterations
            }
        };
        if legal {
            Ok(())
        } else {
            let stage = if action == Action::Refine && self.stage >= RunStage::Scored {
                format!(
                    "{} with {} of {} refinements used",
                    self.stage,
                    self.steps.len(),
                    self.config.max_iterations
                )
            } else {
                self.stage.to_string()
            };
            Err(Error::IllegalTransition {
                action: action.to_string(),
                stage,
            })
        }
    }

    /// Deterministic rendering of one artifact.
    pub fn export(&self, kind: ExportKind) -> Result<String> {
        match kind {
            ExportKind::ScoreJson => self
                .latest_report()
                .map(|r| format!("{}\n", r.to_json()))
                .ok_or_else(|| Error::NotReady("no factuality report yet; run score first".into())),
            ExportKind::GraphJson => self
                .graph
                .as_ref()
                .map(|g| format!("{}\n", g.to_json()))
                .ok_or_else(|| Error::NotReady("no graph yet; run build_graph first".into())),
            ExportKind::TextSummary => self
                .latest_draft()
                .map(|d| format!("{}\n", d.text))
                .ok_or_else(|| Error::NotReady("no summary yet; run summarize first".into())),
        }
    }
}

/// Where provider calls go for each action.
#[derive(Debug, Clone)]
pub enum ProviderSpec {
    /// A fresh scripted backend per action; rule-based scripts behave the same
    /// for every action while queued responses restart each time.
    Scripted(Script),
    /// OpenAI-compatible endpoint. Recording forces one call in flight.
    Remote {
        config: RemoteConfig,
        workers: usize,
        record: bool,
    },
    /// Transcripts saved by an earlier run, one file per action.
    Replay { dir: PathBuf },
}

impl ProviderSpec {
    /// Gateway for one unit of work whose transcript file is `transcript`.
    pub(crate) fn gateway(&self, transcript: &str) -> Result<Gateway> {
        Ok(match self {
            ProviderSpec::Scripted(script) => {
                Gateway::scripted(ScriptedBackend::new(script.clone()))
            }
            ProviderSpec::Remote {
                config,
                workers,
                record,
            } => {
                let backend = RemoteBackend::new(config.clone());
                if *record {
                    Gateway::recording(backend)
                } else {
                    Gateway::live(backend, *workers)
                }
            }
            ProviderSpec::Replay { dir } => Gateway::replay(Transcript::load(
                dir.join(transcript),
                TranscriptMode::Replay,
            )?),
        })
    }
}

pub fn transcript_name(seq: usize, action: Action) -> String {
    format!("{seq:03}-{action}.jsonl")
}

pub(crate) fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
