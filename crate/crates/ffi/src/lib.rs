//! C ABI over `narrafact-core`.
//!
//! Every function returns an [`NfStatus`] and writes results through out
//! pointers. Handles are opaque and owned by the caller once returned; free
//! them with the matching `*_free`. Strings handed out must be released with
//! [`nf_string_free`]. After a non-OK status, [`nf_last_error_message`]
//! describes the failure on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use narrafact_core::ckg::{
    build_ckg, build_names_graph, linearize, select_edges, AliasPair, CharacterKG, Triple,
};
use narrafact_core::corpus::{chunk_scenes, parse_scene_json, Narrative};
use narrafact_core::evalharness::{
    kendall_tau, permutation_pvalue, rouge_l, rouge_n, spearman, ScorePairSeries, Statistic,
};
use narrafact_core::factscore::{score_summary, ScoringOptions};
use narrafact_core::provider::{Gateway, Script, ScriptedBackend};
use narrafact_core::retrieval::{RetrievalBackend, Retriever};
use narrafact_core::summarize::{hierarchical_summary, MergeMode, SummaryDraft};
use narrafact_core::Error;
use serde::Deserialize;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    MalformedInput = 3,
    InvalidInput = 4,
    InvalidParams = 5,
    EmptyInput = 6,
    Provider = 7,
    NoFacts = 8,
    DegenerateSeries = 9,
    Io = 10,
    Internal = 11,
    Panic = 12,
}

/// Which rank statistic a permutation test uses.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NfStatistic {
    Spearman = 0,
    Kendall = 1,
}

/// A parsed narrative.
pub struct NfNarrative {
    inner: Narrative,
}

/// A character knowledge graph.
pub struct NfGraph {
    inner: CharacterKG,
}

/// Scripted provider used for graph building, summarizing and scoring.
pub struct NfEngine {
    script: Script,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(NfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::MalformedInput(_) | Error::Serde(_) => NfStatus::MalformedInput,
            Error::InvalidInput(_) => NfStatus::InvalidInput,
            Error::InvalidParams(_) | Error::ContextOverflow { .. } => NfStatus::InvalidParams,
            Error::EmptyInput => NfStatus::EmptyInput,
            Error::ProviderExhausted { .. }
            | Error::Remote { .. }
            | Error::ReplayMismatch { .. }
            | Error::EmptyResponse { .. }
            | Error::SentenceCountMismatch { .. } => NfStatus::Provider,
            Error::NoFacts => NfStatus::NoFacts,
            Error::DegenerateSeries(_) => NfStatus::DegenerateSeries,
            Error::Io { .. } => NfStatus::Io,
            _ => NfStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(NfStatus::MalformedInput, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(NfStatus::NullArgument, format!("{what} is null"))
}

/// Runs `f`, turning errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            NfStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(NfStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s)
        .map_err(|_| Failure(NfStatus::Internal, "output contains a nul byte".into()))?;
    write(out, c.into_raw(), "out")
}

unsafe fn series(x: *const f64, y: *const f64, n: usize) -> Result<ScorePairSeries, Failure> {
    if n > 0 && (x.is_null() || y.is_null()) {
        return Err(null("series"));
    }
    let (x, y): (&[f64], &[f64]) = if n == 0 {
        (&[], &[])
    } else {
        (
            std::slice::from_raw_parts(x, n),
            std::slice::from_raw_parts(y, n),
        )
    };
    Ok(ScorePairSeries::from_values(x, y)?)
}

/// Message for the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn nf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, nul-terminated library version.
#[no_mangle]
pub extern "C" fn nf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn nf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses scene JSON: `{"id", "title", "scenes": [{"index", "text"}]}`.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nf_narrative_from_json(
    json: *const c_char,
    out: *mut *mut NfNarrative,
) -> NfStatus {
    guard(|| {
        let inner = parse_scene_json(text(json, "json")?)?;
        write(out, Box::into_raw(Box::new(NfNarrative { inner })), "out")
    })
}

/// # Safety
/// `narrative` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nf_narrative_scene_count(
    narrative: *const NfNarrative,
    out: *mut usize,
) -> NfStatus {
    guard(|| {
        write(
            out,
            handle(narrative, "narrative")?.inner.scene_count(),
            "out",
        )
    })
}

/// Number of chunks greedy scene packing produces under `budget` tokens.
///
/// # Safety
/// `narrative` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nf_narrative_chunk_count(
    narrative: *const NfNarrative,
    budget: usize,
    out: *mut usize,
) -> NfStatus {
    guard(|| {
        let chunks = chunk_scenes(&handle(narrative, "narrative")?.inner, budget)?;
        write(out, chunks.len(), "out")
    })
}

/// # Safety
/// `narrative` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn nf_narrative_free(narrative: *mut NfNarrative) {
    if !narrative.is_null() {
        drop(Box::from_raw(narrative));
    }
}

#[derive(Deserialize)]
struct GraphInputs {
    tau: usize,
    alias_pairs: Vec<AliasPair>,
    triples: Vec<Triple>,
}

/// Builds a graph from already-extracted data:
/// `{"tau", "alias_pairs": [{"left", "right", "scene_index"}], "triples": [...]}`.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nf_graph_from_triples_json(
    json: *const c_char,
    out: *mut *mut NfGraph,
) -> NfStatus {
    guard(|| {
        let inputs: GraphInputs = serde_json::from_str(text(json, "json")?)?;
        let inner = select_edges(
            &inputs.triples,
            &build_names_graph(&inputs.alias_pairs),
            inputs.tau,
        )?;
        write(out, Box::into_raw(Box::new(NfGraph { inner })), "out")
    })
}

/// Plain-text rendering of the graph, as shown to the judge.
///
/// # Safety
/// `graph` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nf_graph_linearize(
    graph: *const NfGraph,
    out: *mut *mut c_char,
) -> NfStatus {
    guard(|| write_string(out, linearize(&handle(graph, "graph")?.inner)))
}

/// # Safety
/// `graph` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nf_graph_to_json(
    graph: *const NfGraph,
    out: *mut *mut c_char,
) -> NfStatus {
    guard(|| write_string(out, handle(graph, "graph")?.inner.to_json()))
}

/// # Safety
/// `graph` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn nf_graph_free(graph: *mut NfGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// ROUGE-N F1 in [0, 100] for `n` of 1 or 2.
///
/// # Safety
/// Strings must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nf_rouge_n(
    candidate: *const c_char,
    reference: *const c_char,
    n: usize,
    out: *mut f64,
) -> NfStatus {
    guard(|| {
        write(
            out,
            rouge_n(
                text(candidate, "candidate")?,
                text(reference, "reference")?,
                n,
            )?,
            "out",
        )
    })
}

/// ROUGE-L F1 in [0, 100].
///
/// # Safety
/// Strings must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nf_rouge_l(
    candidate: *const c_char,
    reference: *const c_char,
    out: *mut f64,
) -> NfStatus {
    guard(|| {
        write(
            out,
            rouge_l(text(candidate, "candidate")?, text(reference, "reference")?)?,
            "out",
        )
    })
}

/// # Safety
/// `metric` and `human` must each point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nf_spearman(
    metric: *const f64,
    human: *const f64,
    n: usize,
    out: *mut f64,
) -> NfStatus {
    guard(|| write(out, spearman(&series(metric, human, n)?)?, "out"))
}

/// Kendall tau-b.
///
/// # Safety
/// `metric` and `human` must each point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nf_kendall(
    metric: *const f64,
    human: *const f64,
    n: usize,
    out: *mut f64,
) -> NfStatus {
    guard(|| write(out, kendall_tau(&series(metric, human, n)?)?, "out"))
}

/// Two-sided permutation p-value over shuffles of the human scores.
///
/// # Safety
/// `metric` and `human` must each point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nf_permutation_pvalue(
    metric: *const f64,
    human: *const f64,
    n: usize,
    statistic: NfStatistic,
    permutations: usize,
    seed: u64,
    out: *mut f64,
) -> NfStatus {
    guard(|| {
        let stat = match statistic {
            NfStatistic::Spearman => Statistic::Spearman,
            NfStatistic::Kendall => Statistic::Kendall,
        };
        write(
            out,
            permutation_pvalue(&series(metric, human, n)?, stat, permutations, seed)?,
            "out",
        )
    })
}

/// Engine over a scripted provider: `{"rules": [...], "queue": [...], "embeddings": {...}}`.
///
/// # Safety
/// `script_json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nf_engine_scripted(
    script_json: *const c_char,
    out: *mut *mut NfEngine,
) -> NfStatus {
    guard(|| {
        let script: Script = serde_json::from_str(text(script_json, "script_json")?)?;
        write(out, Box::into_raw(Box::new(NfEngine { script })), "out")
    })
}

impl NfEngine {
    fn gateway(&self) -> Gateway {
        Gateway::scripted(ScriptedBackend::new(self.script.clone()))
    }
}

/// Extracts a character graph over `rounds` passes, keeping predicates seen at least `tau` times.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nf_engine_build_graph(
    engine: *const NfEngine,
    narrative: *const NfNarrative,
    rounds: usize,
    tau: usize,
    out: *mut *mut NfGraph,
) -> NfStatus {
    guard(|| {
        let engine = handle(engine, "engine")?;
        let narrative = handle(narrative, "narrative")?;
        let inner = build_ckg(&engine.gateway(), &narrative.inner, rounds, tau, 0.0)?;
        write(out, Box::into_raw(Box::new(NfGraph { inner })), "out")
    })
}

/// Drafts a summary by summarizing chunks of at most `chunk_budget` tokens.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nf_engine_summarize(
    engine: *const NfEngine,
    narrative: *const NfNarrative,
    chunk_budget: usize,
    out: *mut *mut c_char,
) -> NfStatus {
    guard(|| {
        let engine = handle(engine, "engine")?;
        let narrative = handle(narrative, "narrative")?;
        let outcome = hierarchical_summary(
            &engine.gateway(),
            &narrative.inner,
            chunk_budget,
            MergeMode::Concat,
        )?;
        write_string(out, outcome.draft.text)
    })
}

/// Scores `summary` against the narrative; writes the report as JSON.
/// `graph` may be null to judge against scenes only.
///
/// # Safety
/// Handles must be live or, for `graph`, null; `summary` must be
/// nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nf_engine_score(
    engine: *const NfEngine,
    narrative: *const NfNarrative,
    graph: *const NfGraph,
    summary: *const c_char,
    out: *mut *mut c_char,
) -> NfStatus {
    guard(|| {
        let engine = handle(engine, "engine")?;
        let narrative = handle(narrative, "narrative")?;
        let graph = graph.as_ref().map(|g| &g.inner);
        let draft = SummaryDraft::from_text(0, text(summary, "summary")?, None);
        let gateway = engine.gateway();
        let retriever = Retriever::new(&gateway, RetrievalBackend::Embedding);
        let options = ScoringOptions {
            use_graph: graph.is_some(),
            ..ScoringOptions::default()
        };
        let report = score_summary(
            &gateway,
            &retriever,
            &draft,
            &narrative.inner,
            graph,
            options,
        )?;
        write_string(out, report.to_json())
    })
}

/// # Safety
/// `engine` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn nf_engine_free(engine: *mut NfEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}
