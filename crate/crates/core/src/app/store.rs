//! File-backed run persistence.
//!
//! Each run owns a directory:
//!
//! ```text
//! <runs>/<run_id>/manifest.json       stage, config, jobs, artifact file names
//! <runs>/<run_id>/narrative.json
//! <runs>/<run_id>/{graph,drafts,reports,steps}-<hash>.json
//! <runs>/<run_id>/transcripts/NNN-<action>.jsonl
//! ```
//!
//! Artifact files are named by content hash and never rewritten in place.
//! Every file goes through write-to-temp then rename, and the manifest is
//! renamed last, so a crash at any point leaves the previous manifest pointing
//! at intact artifacts.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{now, JobRecord, PipelineConfig, RunRecord, RunStage};
use crate::ckg::CharacterKG;
use crate::corpus::Narrative;
use crate::error::{Error, Result};
use crate::factscore::FactScoreReport;
use crate::provider::Transcript;
use crate::refine::RefinementStep;
use crate::summarize::SummaryDraft;
use crate::Diagnostic;

const MANIFEST: &str = "manifest.json";
const NARRATIVE: &str = "narrative.json";
const TRANSCRIPTS: &str = "transcripts";
const ARTIFACT_PREFIXES: [&str; 4] = ["graph-", "drafts-", "reports-", "steps-"];

/// Called with the destination path after the temp file is written and
/// before the rename; returning true aborts the write as if the process died.
pub type CrashHook = Arc<dyn Fn(&Path) -> bool + Send + Sync>;
pub type IdSource = Arc<dyn Fn() -> String + Send + Sync>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Counts {
    drafts: usize,
    reports: usize,
    steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    run_id: String,
    narrative_ref: String,
    stage: RunStage,
    config: PipelineConfig,
    graph_file: Option<String>,
    drafts_file: String,
    reports_file: String,
    steps_file: String,
    counts: Counts,
    jobs: Vec<JobRecord>,
    actions_applied: usize,
    diagnostics: Vec<Diagnostic>,
    last_error: Option<String>,
    created_at: String,
    updated_at: String,
}

pub struct RunStore {
    root: PathBuf,
    busy: Mutex<HashSet<String>>,
    crash_hook: Mutex<Option<CrashHook>>,
    id_source: Mutex<IdSource>,
}

/// Exclusive claim on one run, released on drop.
pub struct RunGuard {
    store: Arc<RunStore>,
    run_id: String,
}

impl RunGuard {
    pub fn run_id(&self) -> &str {
        &self.run_id
    }
}

impl Drop for RunGuard {
    fn drop(&mut self) {
        self.store
            .busy
            .lock()
            .expect("lock table poisoned")
            .remove(&self.run_id);
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self {
            root,
            busy: Mutex::new(HashSet::new()),
            crash_hook: Mutex::new(None),
            id_source: Mutex::new(Arc::new(|| uuid::Uuid::new_v4().simple().to_string())),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_crash_hook(&self, hook: Option<CrashHook>) {
        *self.crash_hook.lock().expect("hook poisoned") = hook;
    }

    pub fn set_id_source(&self, source: IdSource) {
        *self.id_source.lock().expect("id source poisoned") = source;
    }

    pub fn run_dir(&self, run_id: &str) -> Result<PathBuf> {
        if !valid_id(run_id) {
            return Err(Error::RunNotFound(run_id.to_string()));
        }
        Ok(self.root.join(run_id))
    }

    pub fn transcripts_dir(&self, run_id: &str) -> Result<PathBuf> {
        Ok(self.run_dir(run_id)?.join(TRANSCRIPTS))
    }

    fn atomic_write(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let tmp = path.with_file_name(format!(".{name}.tmp"));
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        let hook = self.crash_hook.lock().expect("hook poisoned").clone();
        if hook.is_some_and(|h| h(path)) {
            return Err(Error::io(
                path,
                std::io::Error::other("injected crash before rename"),
            ));
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    fn write_artifact<T: Serialize>(&self, dir: &Path, prefix: &str, value: &T) -> Result<String> {
        let bytes = serde_json::to_vec_pretty(value)?;
        let name = format!("{prefix}{}.json", short_hash(&bytes));
        let path = dir.join(&name);
        if !path.exists() {
            self.atomic_write(&path, &bytes)?;
        }
        Ok(name)
    }

    fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&raw)
            .map_err(|e| Error::MalformedInput(format!("{}: {e}", path.display())))
    }

    /// Persists a new run at stage `loaded` under a fresh id.
    pub fn create(&self, narrative: &Narrative, config: PipelineConfig) -> Result<RunRecord> {
        config.validate()?;
        let source = self.id_source.lock().expect("id source poisoned").clone();
        let (run_id, dir) = loop {
            let id = source();
            if !valid_id(&id) {
                return Err(Error::InvalidParams(format!(
                    "generated run id {id:?} is not usable"
                )));
            }
            let dir = self.root.join(&id);
            match fs::create_dir(&dir) {
                Ok(()) => break (id, dir),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(Error::io(&dir, e)),
            }
        };
        self.atomic_write(&dir.join(NARRATIVE), &serde_json::to_vec_pretty(narrative)?)?;
        let ts = now();
        let record = RunRecord {
            run_id,
            narrative_ref: narrative.id.clone(),
            stage: RunStage::Loaded,
            config,
            graph: None,
            drafts: Vec::new(),
            reports: Vec::new(),
            steps: Vec::new(),
            jobs: Vec::new(),
            actions_applied: 0,
            diagnostics: Vec::new(),
            last_error: None,
            created_at: ts.clone(),
            updated_at: ts,
        };
        self.save(&record)?;
        Ok(record)
    }

    pub fn save(&self, record: &RunRecord) -> Result<()> {
        let dir = self.run_dir(&record.run_id)?;
        if !dir.join(NARRATIVE).exists() {
            return Err(Error::RunNotFound(record.run_id.clone()));
        }
        let graph_file = record
            .graph
            .as_ref()
            .map(|g| self.write_artifact(&dir, "graph-", g))
            .transpose()?;
        let manifest = Manifest {
            run_id: record.run_id.clone(),
            narrative_ref: record.narrative_ref.clone(),
            stage: record.stage,
            config: record.config.clone(),
            graph_file,
            drafts_file: self.write_artifact(&dir, "drafts-", &record.drafts)?,
            reports_file: self.write_artifact(&dir, "reports-", &record.reports)?,
            steps_file: self.write_artifact(&dir, "steps-", &record.steps)?,
            counts: Counts {
                drafts: record.drafts.len(),
                reports: record.reports.len(),
                steps: record.steps.len(),
            },
            jobs: record.jobs.clone(),
            actions_applied: record.actions_applied,
            diagnostics: record.diagnostics.clone(),
            last_error: record.last_error.clone(),
            created_at: record.created_at.clone(),
            updated_at: record.updated_at.clone(),
        };
        self.atomic_write(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
        self.collect_garbage(&dir, &manifest);
        Ok(())
    }

    /// Removes artifacts the manifest no longer names; failures are ignored.
    fn collect_garbage(&self, dir: &Path, manifest: &Manifest) {
        let keep: HashSet<&str> = [
            manifest.graph_file.as_deref(),
            Some(manifest.drafts_file.as_str()),
            Some(manifest.reports_file.as_str()),
            Some(manifest.steps_file.as_str()),
        ]
        .into_iter()
        .flatten()
        .collect();
        let Ok(entries) = fs::read_dir(dir) else {
            return;
        };
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            let artifact =
                ARTIFACT_PREFIXES.iter().any(|p| name.starts_with(p)) && name.ends_with(".json");
            if artifact && !keep.contains(name.as_str()) {
                let _ = fs::remove_file(entry.path());
            }
        }
    }

    pub fn load(&self, run_id: &str) -> Result<RunRecord> {
        let dir = self.run_dir(run_id)?;
        let manifest_path = dir.join(MANIFEST);
        if !manifest_path.exists() {
            return Err(Error::RunNotFound(run_id.to_string()));
        }
        let m: Manifest = Self::read_json(&manifest_path)?;
        let graph: Option<CharacterKG> = m
            .graph_file
            .as_ref()
            .map(|f| Self::read_json(&dir.join(f)))
            .transpose()?;
        let drafts: Vec<SummaryDraft> = Self::read_json(&dir.join(&m.drafts_file))?;
        let reports: Vec<FactScoreReport> = Self::read_json(&dir.join(&m.reports_file))?;
        let steps: Vec<RefinementStep> = Self::read_json(&dir.join(&m.steps_file))?;
        if (drafts.len(), reports.len(), steps.len())
            != (m.counts.drafts, m.counts.reports, m.counts.steps)
        {
            return Err(Error::MalformedInput(format!(
                "run {run_id}: artifact lengths disagree with the manifest"
            )));
        }
        Ok(RunRecord {
            run_id: m.run_id,
            narrative_ref: m.narrative_ref,
            stage: m.stage,
            config: m.config,
            graph,
            drafts,
            reports,
            steps,
            jobs: m.jobs,
            actions_applied: m.actions_applied,
            diagnostics: m.diagnostics,
            last_error: m.last_error,
            created_at: m.created_at,
            updated_at: m.updated_at,
        })
    }

    pub fn load_narrative(&self, run_id: &str) -> Result<Narrative> {
        let path = self.run_dir(run_id)?.join(NARRATIVE);
        if !path.exists() {
            return Err(Error::RunNotFound(run_id.to_string()));
        }
        Self::read_json(&path)
    }

    pub fn save_transcript(&self, run_id: &str, name: &str, transcript: &Transcript) -> Result<()> {
        let dir = self.transcripts_dir(run_id)?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.atomic_write(&dir.join(name), transcript.to_jsonl().as_bytes())
    }

    /// Run ids with a committed manifest, sorted.
    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))? {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if valid_id(&name) && entry.path().join(MANIFEST).exists() {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Claims `run_id` for a mutation; `Busy` when another claim is live.
    pub fn try_lock(self: &Arc<Self>, run_id: &str) -> Result<RunGuard> {
        let mut busy = self.busy.lock().expect("lock table poisoned");
        if !busy.insert(run_id.to_string()) {
            return Err(Error::Busy(run_id.to_string()));
        }
        Ok(RunGuard {
            store: Arc::clone(self),
            run_id: run_id.to_string(),
        })
    }
}
