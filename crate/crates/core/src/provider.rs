//! Gateway for chat-completion and embedding calls.
//!
//! Every pipeline stage talks to a [`Gateway`]. Behind it sits a [`Backend`]
//! (an OpenAI-compatible remote endpoint or a [`ScriptedBackend`]) or a
//! recorded [`Transcript`] being replayed. While a transcript is attached the
//! gateway reports a parallelism of 1 so that request order, and therefore the
//! transcript, is reproducible.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_MODEL: &str = "gpt-4o-mini-2024-07-18";
pub const DEFAULT_EMBED_MODEL: &str = "bge-m3";
pub const HASHED_EMBEDDING_DIM: usize = 256;

pub const ENV_CHAT_URL: &str = "NARRAFACT_CHAT_URL";
pub const ENV_API_KEY: &str = "NARRAFACT_API_KEY";
pub const ENV_MODEL: &str = "NARRAFACT_MODEL";
pub const ENV_EMBED_URL: &str = "NARRAFACT_EMBED_URL";
pub const ENV_EMBED_MODEL: &str = "NARRAFACT_EMBED_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub prompt: String,
    pub temperature: f64,
    pub tag: String,
}

impl ChatRequest {
    pub fn new(
        tag: impl Into<String>,
        prompt: impl Into<String>,
        temperature: f64,
    ) -> Result<Self> {
        let prompt = prompt.into();
        if prompt.trim().is_empty() {
            return Err(Error::InvalidInput("chat prompt is empty".into()));
        }
        if !(0.0..=2.0).contains(&temperature) {
            return Err(Error::InvalidParams(format!(
                "temperature {temperature} outside [0, 2]"
            )));
        }
        Ok(Self {
            prompt,
            temperature,
            tag: tag.into(),
        })
    }
}

/// Hex SHA-256 of `text`; identifies prompts and embedded texts in transcripts.
pub fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub trait Backend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String>;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Lowercased terms with surrounding punctuation stripped. Shared by the
/// hashed embedding and the lexical similarity fallback.
pub fn lexical_terms(text: &str) -> Vec<String> {
    let terms: Vec<String> = text
        .split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect();
    if terms.is_empty() {
        text.split_whitespace().map(str::to_lowercase).collect()
    } else {
        terms
    }
}

/// Deterministic model-free embedding: hashed term counts scaled to unit norm.
pub fn hashed_embedding(text: &str) -> Result<Vec<f64>> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut v = vec![0.0; HASHED_EMBEDDING_DIM];
    for term in lexical_terms(text) {
        let h = Sha256::digest(term.as_bytes());
        let mut word = [0u8; 8];
        word.copy_from_slice(&h[..8]);
        let bucket = (u64::from_le_bytes(word) % HASHED_EMBEDDING_DIM as u64) as usize;
        v[bucket] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Matches requests whose tag starts with this prefix.
    #[serde(default)]
    pub tag_prefix: Option<String>,
    /// Matches requests whose prompt contains this substring.
    #[serde(default)]
    pub contains: Option<String>,
    pub response: String,
    /// How many times the rule may fire; unlimited when absent.
    #[serde(default)]
    pub times: Option<usize>,
}

impl ScriptRule {
    pub fn tag(prefix: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            tag_prefix: Some(prefix.into()),
            response: response.into(),
            ..Self::default()
        }
    }

    pub fn containing(needle: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            contains: Some(needle.into()),
            response: response.into(),
            ..Self::default()
        }
    }

    pub fn with_tag(mut self, prefix: impl Into<String>) -> Self {
        self.tag_prefix = Some(prefix.into());
        self
    }

    pub fn times(mut self, n: usize) -> Self {
        self.times = Some(n);
        self
    }

    fn matches(&self, request: &ChatRequest) -> bool {
        self.tag_prefix
            .as_deref()
            .is_none_or(|p| request.tag.starts_with(p))
            && self
                .contains
                .as_deref()
                .is_none_or(|c| request.prompt.contains(c))
    }
}

/// On-disk form of a scripted backend.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub queue: Vec<String>,
    #[serde(default)]
    pub embeddings: HashMap<String, Vec<f64>>,
}

impl Script {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::MalformedInput(e.to_string()))
    }
}

/// Offline backend. Rules are tried first (in order); otherwise the next
/// queued response is consumed FIFO. Embeddings come from the script's table
/// or fall back to [`hashed_embedding`].
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    state: Mutex<ScriptState>,
    embeddings: HashMap<String, Vec<f64>>,
}

#[derive(Debug, Default)]
struct ScriptState {
    fired: Vec<usize>,
    queue: VecDeque<String>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        Self {
            state: Mutex::new(ScriptState {
                fired: vec![0; script.rules.len()],
                queue: script.queue.into(),
            }),
            rules: script.rules,
            embeddings: script.embeddings,
        }
    }

    pub fn from_queue<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(Script {
            queue: responses.into_iter().map(Into::into).collect(),
            ..Script::default()
        })
    }

    pub fn from_rules(rules: Vec<ScriptRule>) -> Self {
        Self::new(Script {
            rules,
            ..Script::default()
        })
    }

    pub fn remaining_queue(&self) -> usize {
        self.state
            .lock()
            .expect("script state poisoned")
            .queue
            .len()
    }
}

impl Backend for ScriptedBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String> {
        let mut state = self.state.lock().expect("script state poisoned");
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.times.is_some_and(|t| state.fired[i] >= t) {
                continue;
            }
            if rule.matches(request) {
                state.fired[i] += 1;
                return Ok(rule.response.clone());
            }
        }
        state
            .queue
            .pop_front()
            .ok_or_else(|| Error::ProviderExhausted {
                tag: request.tag.clone(),
            })
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::EmptyInput);
        }
        match self.embeddings.get(text) {
            Some(v) => Ok(v.clone()),
            None => hashed_embedding(text),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub chat_url: String,
    pub api_key: Option<String>,
    pub model: String,
    /// Without an embedding endpoint the hashed embedding is used.
    pub embed_url: Option<String>,
    pub embed_model: String,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
}

impl RemoteConfig {
    pub fn new(chat_url: impl Into<String>) -> Self {
        Self {
            chat_url: chat_url.into(),
            api_key: None,
            model: DEFAULT_MODEL.to_string(),
            embed_url: None,
            embed_model: DEFAULT_EMBED_MODEL.to_string(),
            max_attempts: 3,
            backoff_base: Duration::from_secs(1),
            timeout: Duration::from_secs(120),
        }
    }

    pub fn from_env() -> Result<Self> {
        let chat_url = std::env::var(ENV_CHAT_URL)
            .map_err(|_| Error::InvalidParams(format!("{ENV_CHAT_URL} is not set")))?;
        let mut config = Self::new(chat_url);
        config.api_key = std::env::var(ENV_API_KEY).ok();
        if let Ok(model) = std::env::var(ENV_MODEL) {
            config.model = model;
        }
        config.embed_url = std::env::var(ENV_EMBED_URL).ok();
        if let Ok(model) = std::env::var(ENV_EMBED_MODEL) {
            config.embed_model = model;
        }
        Ok(config)
    }
}

/// OpenAI-compatible HTTP backend with retry and exponential backoff.
pub struct RemoteBackend {
    config: RemoteConfig,
    // Built lazily so the blocking client is never created on an async thread.
    client: OnceLock<reqwest::blocking::Client>,
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        Self {
            config,
            client: OnceLock::new(),
        }
    }

    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(self.config.timeout)
                .build()
                .expect("http client")
        })
    }

    fn post_json(&self, url: &str, body: &serde_json::Value) -> Result<serde_json::Value> {
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.try_post(url, body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(message)) => {
                    return Err(Error::Remote {
                        attempts: attempt,
                        message,
                    })
                }
                Err(Attempt::Retry(message)) => {
                    tracing::warn!(attempt, %message, "transient provider failure");
                    last = message;
                    if attempt < attempts {
                        std::thread::sleep(self.config.backoff_base * 2u32.pow(attempt - 1));
                    }
                }
            }
        }
        Err(Error::Remote {
            attempts,
            message: last,
        })
    }

    fn try_post(&self, url: &str, body: &serde_json::Value) -> Result<serde_json::Value, Attempt> {
        let mut req = self.client().post(url).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(format!("HTTP {status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| Attempt::Fatal(format!("bad JSON: {e}")))
    }
}

impl Backend for RemoteBackend {
    fn chat(&self, request: &ChatRequest) -> Result<String> {
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
        });
        let value = self.post_json(&self.config.chat_url, &body)?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| Error::Remote {
                attempts: 1,
                message: "response has no choices[0].message.content".into(),
            })
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::EmptyInput);
        }
        let Some(url) = &self.config.embed_url else {
            return hashed_embedding(text);
        };
        let body = serde_json::json!({"model": self.config.embed_model, "input": text});
        let value = self.post_json(url, &body)?;
        value["data"][0]["embedding"]
            .as_array()
            .and_then(|a| {
                a.iter()
                    .map(serde_json::Value::as_f64)
                    .collect::<Option<Vec<_>>>()
            })
            .ok_or_else(|| Error::Remote {
                attempts: 1,
                message: "response has no data[0].embedding".into(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptMode {
    Record,
    Replay,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Chat,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub kind: EntryKind,
    pub tag: String,
    pub digest: String,
    /// Response text; for embeddings, the vector as a JSON array.
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub mode: TranscriptMode,
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new(mode: TranscriptMode) -> Self {
        Self {
            mode,
            entries: Vec::new(),
        }
    }

    pub fn chat_entries(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::Chat)
    }

    pub fn count_tag(&self, prefix: &str) -> usize {
        self.chat_entries()
            .filter(|e| e.tag.starts_with(prefix))
            .count()
    }

    /// Newline-delimited JSON, one entry per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, mode: TranscriptMode) -> Result<Self> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str(&line).map_err(|e| Error::MalformedInput(e.to_string()))?,
            );
        }
        Ok(Self { mode, entries })
    }
}

enum Route {
    Backend(Box<dyn Backend>),
    Replay {
        chat: Vec<TranscriptEntry>,
        cursor: AtomicUsize,
        embeddings: HashMap<String, String>,
    },
}

pub struct Gateway {
    route: Route,
    transcript: Option<Mutex<Transcript>>,
    workers: usize,
}

impl Gateway {
    /// Live backend without a transcript; fan-out up to `workers` calls.
    pub fn live(backend: impl Backend + 'static, workers: usize) -> Self {
        Self {
            route: Route::Backend(Box::new(backend)),
            transcript: None,
            workers: workers.max(1),
        }
    }

    pub fn scripted(backend: ScriptedBackend) -> Self {
        Self {
            route: Route::Backend(Box::new(backend)),
            transcript: Some(Mutex::new(Transcript::new(TranscriptMode::Scripted))),
            workers: 1,
        }
    }

    pub fn recording(backend: impl Backend + 'static) -> Self {
        Self {
            route: Route::Backend(Box::new(backend)),
            transcript: Some(Mutex::new(Transcript::new(TranscriptMode::Record))),
            workers: 1,
        }
    }

    pub fn replay(transcript: Transcript) -> Self {
        let mut chat = Vec::new();
        let mut embeddings = HashMap::new();
        for e in &transcript.entries {
            match e.kind {
                EntryKind::Chat => chat.push(e.clone()),
                EntryKind::Embed => {
                    embeddings.insert(e.digest.clone(), e.response.clone());
                }
            }
        }
        Self {
            route: Route::Replay {
                chat,
                cursor: AtomicUsize::new(0),
                embeddings,
            },
            transcript: Some(Mutex::new(Transcript {
                mode: TranscriptMode::Replay,
                entries: transcript.entries,
            })),
            workers: 1,
        }
    }

    /// How many provider calls a stage may keep in flight.
    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn mode(&self) -> Option<TranscriptMode> {
        self.transcript
            .as_ref()
            .map(|t| t.lock().expect("transcript poisoned").mode)
    }

    pub fn chat_complete(&self, request: &ChatRequest) -> Result<String> {
        let d = digest(&request.prompt);
        match &self.route {
            Route::Backend(backend) => {
                let response = backend.chat(request)?;
                self.append(EntryKind::Chat, &request.tag, d, response.clone());
                Ok(response)
            }
            Route::Replay { chat, cursor, .. } => {
                let position = cursor.fetch_add(1, Ordering::SeqCst);
                let entry = chat.get(position).ok_or_else(|| Error::ReplayMismatch {
                    position,
                    expected: "<end of transcript>".into(),
                    actual: d.clone(),
                })?;
                if entry.digest != d {
                    return Err(Error::ReplayMismatch {
                        position,
                        expected: entry.digest.clone(),
                        actual: d,
                    });
                }
                Ok(entry.response.clone())
            }
        }
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::EmptyInput);
        }
        let d = digest(text);
        match &self.route {
            Route::Backend(backend) => {
                let v = backend.embed(text)?;
                let encoded = serde_json::to_string(&v)?;
                self.append(EntryKind::Embed, "embed", d, encoded);
                Ok(v)
            }
            Route::Replay { embeddings, .. } => {
                let raw = embeddings.get(&d).ok_or_else(|| Error::ReplayMismatch {
                    position: 0,
                    expected: "<no recorded embedding>".into(),
                    actual: d.clone(),
                })?;
                Ok(serde_json::from_str(raw)?)
            }
        }
    }

    fn append(&self, kind: EntryKind, tag: &str, digest: String, response: String) {
        if let Some(t) = &self.transcript {
            t.lock()
                .expect("transcript poisoned")
                .entries
                .push(TranscriptEntry {
                    kind,
                    tag: tag.to_string(),
                    digest,
                    response,
                });
        }
    }

    pub fn transcript(&self) -> Option<Transcript> {
        self.transcript
            .as_ref()
            .map(|t| t.lock().expect("transcript poisoned").clone())
    }

    /// Number of chat calls whose tag starts with `prefix`.
    pub fn calls_tagged(&self, prefix: &str) -> usize {
        self.transcript()
            .map(|t| t.count_tag(prefix))
            .unwrap_or_default()
    }
}
