//! Narrative ingestion, token counting and chunking.
//!
//! Two chunkers live here: [`chunk_scenes`] packs whole scenes greedily into a
//! token budget for hierarchical summarization, and [`segment_plain_text`]
//! cuts unsegmented text into overlapping windows that act as pseudo-scenes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CHUNK_BUDGET: usize = 1024;
pub const DEFAULT_WINDOW: usize = 256;
pub const DEFAULT_OVERLAP: usize = 128;

/// Token counting unit used for every budget in the pipeline.
pub trait Tokenizer: Send + Sync {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str>;

    fn count(&self, text: &str) -> usize {
        self.tokenize(text).len()
    }
}

/// Splits on runs of unicode whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        text.split_whitespace().collect()
    }
}

pub fn tokenize(text: &str) -> Vec<&str> {
    WhitespaceTokenizer.tokenize(text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub index: usize,
    pub text: String,
    pub token_count: usize,
}

impl Scene {
    pub fn new(index: usize, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::MalformedInput(format!("scene {index} is empty")));
        }
        let token_count = tokenize(&text).len();
        Ok(Self {
            index,
            text,
            token_count,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Narrative {
    pub id: String,
    pub title: String,
    pub scenes: Vec<Scene>,
}

impl Narrative {
    /// Builds a narrative from scene texts in order, assigning indices `0..m`.
    pub fn from_texts<I, S>(
        id: impl Into<String>,
        title: impl Into<String>,
        texts: I,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let scenes = texts
            .into_iter()
            .enumerate()
            .map(|(i, t)| Scene::new(i, t))
            .collect::<Result<Vec<_>>>()?;
        Self::new(id, title, scenes)
    }

    pub fn new(
        id: impl Into<String>,
        title: impl Into<String>,
        scenes: Vec<Scene>,
    ) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::MalformedInput("narrative has no scenes".into()));
        }
        for (i, scene) in scenes.iter().enumerate() {
            if scene.index != i {
                return Err(Error::MalformedInput(format!(
                    "scene indices must be contiguous from 0; position {i} has index {}",
                    scene.index
                )));
            }
            if scene.text.trim().is_empty() {
                return Err(Error::MalformedInput(format!("scene {i} is empty")));
            }
        }
        Ok(Self {
            id: id.into(),
            title: title.into(),
            scenes,
        })
    }

    /// Unsegmented text cut into overlapping windows, each window becoming a
    /// pseudo-scene.
    pub fn from_plain_windows(
        id: impl Into<String>,
        title: impl Into<String>,
        text: &str,
        window: usize,
        overlap: usize,
    ) -> Result<Self> {
        let chunks = segment_plain_text(text, window, overlap)?;
        Self::from_texts(id, title, chunks.into_iter().map(|c| c.text))
    }

    pub fn scene_count(&self) -> usize {
        self.scenes.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.scenes.iter().map(|s| s.token_count).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    SceneJson,
    PlainText,
}

#[derive(Deserialize)]
struct SceneJsonFile {
    id: String,
    #[serde(default)]
    title: String,
    scenes: Vec<SceneJsonEntry>,
}

#[derive(Deserialize)]
struct SceneJsonEntry {
    index: usize,
    text: String,
}

/// Parses a `scene_json` document.
pub fn parse_scene_json(raw: &str) -> Result<Narrative> {
    let file: SceneJsonFile =
        serde_json::from_str(raw).map_err(|e| Error::MalformedInput(e.to_string()))?;
    let scenes = file
        .scenes
        .into_iter()
        .map(|s| Scene::new(s.index, s.text))
        .collect::<Result<Vec<_>>>()?;
    Narrative::new(file.id, file.title, scenes)
}

pub fn load_narrative(path: impl AsRef<Path>, format: InputFormat) -> Result<Narrative> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        InputFormat::SceneJson => parse_scene_json(&raw),
        InputFormat::PlainText => {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "narrative".to_string());
            Narrative::from_texts(stem.clone(), stem, [raw])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub index: usize,
    /// Contiguous scene indices; empty for overlap windows over plain text.
    pub scene_indices: Vec<usize>,
    pub text: String,
    pub token_count: usize,
    /// First token offset, set only for overlap windows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_start: Option<usize>,
}

/// Greedy left-to-right scene packing. A scene joins the open chunk when the
/// combined count stays within `budget`; an oversized scene sits alone.
pub fn chunk_scenes(narrative: &Narrative, budget: usize) -> Result<Vec<Chunk>> {
    if budget == 0 {
        return Err(Error::InvalidParams("chunk budget must be positive".into()));
    }
    let mut groups: Vec<(Vec<usize>, usize)> = Vec::new();
    for scene in &narrative.scenes {
        match groups.last_mut() {
            Some((indices, tokens)) if *tokens + scene.token_count <= budget => {
                indices.push(scene.index);
                *tokens += scene.token_count;
            }
            _ => groups.push((vec![scene.index], scene.token_count)),
        }
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(index, (scene_indices, token_count))| {
            let text = scene_indices
                .iter()
                .map(|&i| narrative.scenes[i].text.as_str())
                .collect::<Vec<_>>()
                .join("\n\n");
            Chunk {
                index,
                scene_indices,
                text,
                token_count,
                token_start: None,
            }
        })
        .collect())
}

/// Sliding windows of `window` tokens advancing by `window - overlap`.
pub fn segment_plain_text(text: &str, window: usize, overlap: usize) -> Result<Vec<Chunk>> {
    if window == 0 || overlap >= window {
        return Err(Error::InvalidParams(format!(
            "need 0 <= overlap < window, got window={window} overlap={overlap}"
        )));
    }
    let tokens = tokenize(text);
    let stride = window - overlap;
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < tokens.len() {
        let end = (start + window).min(tokens.len());
        chunks.push(Chunk {
            index: chunks.len(),
            scene_indices: Vec::new(),
            text: tokens[start..end].join(" "),
            token_count: end - start,
            token_start: Some(start),
        });
        if end == tokens.len() {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}
