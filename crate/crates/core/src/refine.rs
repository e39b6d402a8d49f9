//! Feedback-driven refinement: flagged facts and their judge feedback are fed
//! back with supporting scenes, the model rewrites the draft, and the result
//! is scored again.

use serde::{Deserialize, Serialize};

use crate::ckg::CharacterKG;
use crate::corpus::Narrative;
use crate::error::{Error, Result};
use crate::factscore::{score_summary, FactScoreReport, ScoringOptions};
use crate::prompts;
use crate::provider::{ChatRequest, Gateway};
use crate::retrieval::Retriever;
use crate::summarize::SummaryDraft;

pub const TAG_REFINE: &str = "refine";
pub const REFINE_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_ITERATIONS: usize = 3;
pub const DEFAULT_CONTEXT_BUDGET: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineOptions {
    pub max_iterations: usize,
    /// Token budget for the script excerpt in the prompt.
    pub context_budget: usize,
    /// Send the whole narrative instead of the flagged facts' evidence scenes.
    pub full_narrative: bool,
    pub scoring: ScoringOptions,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            context_budget: DEFAULT_CONTEXT_BUDGET,
            full_narrative: false,
            scoring: ScoringOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedFact {
    pub fact: String,
    pub feedback: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementStep {
    pub iteration: usize,
    pub input_draft: SummaryDraft,
    pub flagged: Vec<FlaggedFact>,
    pub script_context: String,
    pub output_draft: SummaryDraft,
    pub report_before: FactScoreReport,
    pub report_after: FactScoreReport,
}

pub fn flagged_facts(report: &FactScoreReport) -> Vec<FlaggedFact> {
    report
        .flagged()
        .map(|v| FlaggedFact {
            fact: v.fact.text.clone(),
            feedback: v.feedback.clone().unwrap_or_default(),
        })
        .collect()
}

/// Scene excerpt shown to the refiner. Evidence scenes of flagged facts are
/// deduplicated, the weakest dropped until the rest fit `budget`, and the
/// survivors joined in story order.
pub fn script_context(
    report: &FactScoreReport,
    narrative: &Narrative,
    budget: usize,
    full_narrative: bool,
) -> Result<String> {
    let join = |indices: &[usize]| {
        indices
            .iter()
            .map(|&i| narrative.scenes[i].text.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    };
    if full_narrative {
        let needed = narrative.total_tokens();
        if needed > budget {
            return Err(Error::ContextOverflow { needed, budget });
        }
        let all: Vec<usize> = (0..narrative.scene_count()).collect();
        return Ok(join(&all));
    }

    let mut best: Vec<(usize, f64)> = Vec::new();
    for v in report.flagged() {
        let (scene, score) = (v.evidence.scene_index, v.evidence.scene_score);
        match best.iter_mut().find(|(s, _)| *s == scene) {
            Some(entry) => entry.1 = entry.1.max(score),
            None => best.push((scene, score)),
        }
    }
    best.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let tokens = |set: &[(usize, f64)]| -> usize {
        set.iter()
            .map(|&(s, _)| narrative.scenes[s].token_count)
            .sum()
    };
    while best.len() > 1 && tokens(&best) > budget {
        best.pop();
    }
    let needed = tokens(&best);
    if needed > budget {
        return Err(Error::ContextOverflow { needed, budget });
    }
    let mut scenes: Vec<usize> = best.into_iter().map(|(s, _)| s).collect();
    scenes.sort_unstable();
    Ok(join(&scenes))
}

fn strip_label(response: &str) -> &str {
    let mut s = response.trim();
    for label in ["- Revised Summary:", "Revised Summary:"] {
        if let Some(rest) = s.strip_prefix(label) {
            s = rest.trim();
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefineOnce {
    pub draft: SummaryDraft,
    pub flagged: Vec<FlaggedFact>,
    pub script_context: String,
}

/// Rewrites `draft` from the false verdicts of `report`. With nothing flagged
/// the draft comes back unchanged and no call is made.
pub fn refine_once(
    gateway: &Gateway,
    draft: &SummaryDraft,
    report: &FactScoreReport,
    narrative: &Narrative,
    options: &RefineOptions,
) -> Result<RefineOnce> {
    let flagged = flagged_facts(report);
    if flagged.is_empty() {
        return Ok(RefineOnce {
            draft: draft.clone(),
            flagged,
            script_context: String::new(),
        });
    }
    let context = script_context(
        report,
        narrative,
        options.context_budget,
        options.full_narrative,
    )?;
    let pairs: Vec<(String, String)> = flagged
        .iter()
        .map(|f| (f.fact.clone(), f.feedback.clone()))
        .collect();
    let tag = format!("{TAG_REFINE} iteration {}", draft.iteration + 1);
    let request = ChatRequest::new(
        tag.clone(),
        prompts::refinement(&context, &draft.text, &pairs),
        REFINE_TEMPERATURE,
    )?;
    let response = gateway.chat_complete(&request)?;
    let text = strip_label(&response);
    if text.is_empty() {
        return Err(Error::EmptyResponse { tag });
    }
    Ok(RefineOnce {
        draft: draft.revise(text),
        flagged,
        script_context: context,
    })
}

/// One refinement plus re-scoring of the result.
pub fn refine_step(
    gateway: &Gateway,
    retriever: &Retriever<'_>,
    narrative: &Narrative,
    graph: Option<&CharacterKG>,
    draft: &SummaryDraft,
    report: &FactScoreReport,
    options: &RefineOptions,
) -> Result<RefinementStep> {
    let once = refine_once(gateway, draft, report, narrative, options)?;
    let output = if once.draft == *draft {
        draft.revise(&draft.text)
    } else {
        once.draft
    };
    let report_after = if output.text == draft.text {
        FactScoreReport {
            iteration: output.iteration,
            ..report.clone()
        }
    } else {
        score_summary(
            gateway,
            retriever,
            &output,
            narrative,
            graph,
            options.scoring,
        )?
    };
    Ok(RefinementStep {
        iteration: output.iteration,
        input_draft: draft.clone(),
        flagged: once.flagged,
        script_context: once.script_context,
        output_draft: output,
        report_before: report.clone(),
        report_after,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineLoopOutcome {
    pub final_draft: SummaryDraft,
    pub initial_report: FactScoreReport,
    pub steps: Vec<RefinementStep>,
}

impl RefineLoopOutcome {
    pub fn final_report(&self) -> &FactScoreReport {
        self.steps
            .last()
            .map(|s| &s.report_after)
            .unwrap_or(&self.initial_report)
    }
}

/// Scores `draft`, then refines until the score is 1, a rewrite changes
/// nothing, or `max_iterations` steps have run.
pub fn refine_loop(
    gateway: &Gateway,
    retriever: &Retriever<'_>,
    narrative: &Narrative,
    graph: Option<&CharacterKG>,
    draft: SummaryDraft,
    options: &RefineOptions,
) -> Result<RefineLoopOutcome> {
    let initial_report = score_summary(
        gateway,
        retriever,
        &draft,
        narrative,
        graph,
        options.scoring,
    )?;
    let mut steps: Vec<RefinementStep> = Vec::new();
    let mut current = draft;
    let mut report = initial_report.clone();
    while steps.len() < options.max_iterations && !report.is_perfect() {
        let step = refine_step(
            gateway, retriever, narrative, graph, &current, &report, options,
        )?;
        let unchanged = step.output_draft.text == current.text;
        current = step.output_draft.clone();
        report = step.report_after.clone();
        steps.push(step);
        if unchanged {
            break;
        }
    }
    Ok(RefineLoopOutcome {
        final_draft: current,
        initial_report,
        steps,
    })
}
