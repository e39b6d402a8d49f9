use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("empty input")]
    EmptyInput,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("scripted provider exhausted (request tag `{tag}`)")]
    ProviderExhausted { tag: String },

    #[error("remote provider error after {attempts} attempt(s): {message}")]
    Remote { attempts: u32, message: String },

    #[error("replay mismatch at entry {position}: expected digest {expected}, got {actual}")]
    ReplayMismatch {
        position: usize,
        expected: String,
        actual: String,
    },

    #[error("provider returned an empty response for `{tag}`")]
    EmptyResponse { tag: String },

    #[error("decomposition produced no atomic facts")]
    NoFacts,

    #[error("evidence context of {needed} tokens exceeds the budget of {budget}")]
    ContextOverflow { needed: usize, budget: usize },

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("perturbation changed the sentence count ({expected} -> {actual})")]
    SentenceCountMismatch { expected: usize, actual: usize },

    #[error("illegal transition: cannot {action} while run is {stage}")]
    IllegalTransition { action: String, stage: String },

    #[error("artifact not ready: {0}")]
    NotReady(String),

    #[error("unknown run `{0}`")]
    RunNotFound(String),

    #[error("run `{0}` is busy")]
    Busy(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
