use std::sync::Arc;

use super::store::{RunGuard, RunStore};
use super::{
    now, transcript_name, Action, ExportKind, JobRecord, JobStatus, PipelineConfig, ProviderSpec,
    RunRecord, RunStage,
};
use crate::ckg::build_ckg;
use crate::corpus::Narrative;
use crate::error::{Error, Result};
use crate::evalharness::{perturbation_case, PerturbationCase};
use crate::factscore::score_summary;
use crate::provider::Gateway;
use crate::refine::refine_step;
use crate::retrieval::Retriever;
use crate::summarize::hierarchical_summary;

const PERTURB_TRANSCRIPT: &str = "perturb.jsonl";

/// Run store plus provider: everything an action needs.
pub struct App {
    store: Arc<RunStore>,
    provider: ProviderSpec,
}

impl App {
    pub fn new(store: RunStore, provider: ProviderSpec) -> Self {
        Self {
            store: Arc::new(store),
            provider,
        }
    }

    pub fn store(&self) -> &Arc<RunStore> {
        &self.store
    }

    pub fn create_run(&self, narrative: &Narrative, config: PipelineConfig) -> Result<RunRecord> {
        self.store.create(narrative, config)
    }

    pub fn get(&self, run_id: &str) -> Result<RunRecord> {
        self.store.load(run_id)
    }

    /// Claims the run, checks the transition and records a pending job. The
    /// claim must be held until [`App::run_job`] finishes.
    pub fn submit(&self, run_id: &str, action: Action) -> Result<(RunGuard, JobRecord)> {
        let guard = self.store.try_lock(run_id)?;
        let mut record = self.store.load(run_id)?;
        record.check(action)?;
        let job = JobRecord {
            job_id: format!("job-{}", record.jobs.len() + 1),
            action,
            status: JobStatus::Pending,
            error: None,
            submitted_at: now(),
            finished_at: None,
        };
        record.jobs.push(job.clone());
        self.store.save(&record)?;
        Ok((guard, job))
    }

    /// Executes a submitted job. On failure the prior artifacts stay as they
    /// were and the error is written to the job and the run.
    pub fn run_job(&self, guard: RunGuard, job_id: &str) -> Result<RunRecord> {
        let run_id = guard.run_id().to_string();
        let mut record = self.store.load(&run_id)?;
        let action = record
            .job(job_id)
            .map(|j| j.action)
            .ok_or_else(|| Error::InvalidInput(format!("unknown job {job_id:?}")))?;
        let name = transcript_name(record.actions_applied, action);

        let outcome = self.store.load_narrative(&run_id).and_then(|narrative| {
            let gateway = self.provider.gateway(&name)?;
            let mut next = record.clone();
            let result = execute(action, &mut next, &narrative, &gateway);
            if let Some(t) = gateway.transcript() {
                // Failed actions keep their partial transcript for debugging.
                let file = if result.is_ok() {
                    name.clone()
                } else {
                    format!("{name}.failed")
                };
                self.store.save_transcript(&run_id, &file, &t)?;
            }
            result.map(|()| next)
        });

        let finished = now();
        // A failed save of the new state takes the failure path too, so the
        // job never stays pending.
        let outcome = outcome.and_then(|mut next| {
            next.actions_applied += 1;
            next.last_error = None;
            next.updated_at = finished.clone();
            mark(&mut next, job_id, JobStatus::Done, None, finished.clone());
            self.store.save(&next)?;
            Ok(next)
        });
        outcome.or_else(|e| {
            record.last_error = Some(e.to_string());
            record.updated_at = finished.clone();
            mark(
                &mut record,
                job_id,
                JobStatus::Failed,
                Some(e.to_string()),
                finished,
            );
            self.store.save(&record)?;
            Err(e)
        })
    }

    /// Submit and run in one call.
    pub fn advance(&self, run_id: &str, action: Action) -> Result<RunRecord> {
        let (guard, job) = self.submit(run_id, action)?;
        self.run_job(guard, &job.job_id)
    }

    pub fn export(&self, run_id: &str, kind: ExportKind) -> Result<String> {
        self.store.load(run_id)?.export(kind)
    }

    /// Perturbs `reference`, or the run's latest draft, and scores both
    /// versions against the run's narrative and graph.
    pub fn perturb(&self, run_id: &str, reference: Option<&str>) -> Result<PerturbationCase> {
        let record = self.store.load(run_id)?;
        let narrative = self.store.load_narrative(run_id)?;
        let reference = match reference {
            Some(r) => r.to_string(),
            None => record
                .latest_draft()
                .map(|d| d.text.clone())
                .ok_or_else(|| {
                    Error::NotReady("no summary to perturb; run summarize first".into())
                })?,
        };
        let gateway = self.provider.gateway(PERTURB_TRANSCRIPT)?;
        let retriever = Retriever::new(&gateway, record.config.retrieval);
        let graph = record.graph.as_ref().filter(|_| record.config.use_graph);
        let case = perturbation_case(
            &gateway,
            &retriever,
            &narrative,
            graph,
            &reference,
            record.config.scoring(),
        )?;
        if let Some(t) = gateway.transcript() {
            self.store.save_transcript(run_id, PERTURB_TRANSCRIPT, &t)?;
        }
        Ok(case)
    }
}

fn mark(
    record: &mut RunRecord,
    job_id: &str,
    status: JobStatus,
    error: Option<String>,
    at: String,
) {
    if let Some(job) = record.jobs.iter_mut().find(|j| j.job_id == job_id) {
        job.status = status;
        job.error = error;
        job.finished_at = Some(at);
    }
}

fn execute(
    action: Action,
    record: &mut RunRecord,
    narrative: &Narrative,
    gateway: &Gateway,
) -> Result<()> {
    record.check(action)?;
    let config = record.config.clone();
    match action {
        Action::BuildGraph => {
            let graph = build_ckg(
                gateway,
                narrative,
                config.rounds,
                config.tau,
                config.extraction_temperature,
            )?;
            record.graph = Some(graph);
            record.stage = RunStage::GraphBuilt;
        }
        Action::Summarize => {
            let outcome =
                hierarchical_summary(gateway, narrative, config.chunk_budget, config.merge_mode)?;
            record.drafts = vec![outcome.draft];
            record.diagnostics.extend(outcome.diagnostics);
            record.stage = RunStage::Summarized;
        }
        Action::Score => {
            let draft = record
                .latest_draft()
                .cloned()
                .ok_or_else(|| Error::NotReady("no draft".into()))?;
            let retriever = Retriever::new(gateway, config.retrieval);
            let report = score_summary(
                gateway,
                &retriever,
                &draft,
                narrative,
                record.graph.as_ref(),
                config.scoring(),
            )?;
            record
                .diagnostics
                .extend(report.diagnostics.iter().cloned());
            // Re-scoring the same draft replaces its report.
            if record.reports.len() == record.drafts.len() {
                record.reports.pop();
            }
            record.reports.push(report);
            record.stage = record.stage.max(RunStage::Scored);
        }
        Action::Refine => {
            let draft = record
                .latest_draft()
                .cloned()
                .ok_or_else(|| Error::NotReady("no draft".into()))?;
            let report = record
                .latest_report()
                .cloned()
                .ok_or_else(|| Error::NotReady("no report".into()))?;
            let retriever = Retriever::new(gateway, config.retrieval);
            let step = refine_step(
                gateway,
                &retriever,
                narrative,
                record.graph.as_ref(),
                &draft,
                &report,
                &config.refine_options(),
            )?;
            record
                .diagnostics
                .extend(step.report_after.diagnostics.iter().cloned());
            record.drafts.push(step.output_draft.clone());
            record.reports.push(step.report_after.clone());
            record.steps.push(step);
            record.stage = RunStage::Refined;
        }
    }
    Ok(())
}
