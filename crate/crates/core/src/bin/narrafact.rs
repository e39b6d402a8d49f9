use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use narrafact_core::app::{
    Action, App, ExportKind, PipelineConfig, ProviderSpec, RunRecord, RunStore,
};
use narrafact_core::ckg::default_tau;
use narrafact_core::corpus::{
    load_narrative, InputFormat, Narrative, DEFAULT_OVERLAP, DEFAULT_WINDOW,
};
use narrafact_core::evalharness::{
    correlation_report, load_human_scores, load_metric_series, DEFAULT_PERMUTATIONS, DEFAULT_SEED,
};
use narrafact_core::provider::{RemoteConfig, Script};
use narrafact_core::retrieval::RetrievalBackend;
use narrafact_core::Error;

#[derive(Parser)]
#[command(
    name = "narrafact",
    version,
    about = "Factuality scoring and refinement for narrative summaries"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderKind {
    /// Canned responses from a script file, no network.
    Scripted,
    /// OpenAI-compatible endpoint configured through NARRAFACT_* variables.
    Remote,
    /// Transcripts saved by a previous run.
    Replay,
}

#[derive(Args)]
struct Global {
    /// Directory holding one subdirectory per run.
    #[arg(
        long,
        global = true,
        env = "NARRAFACT_RUNS_DIR",
        default_value = "runs"
    )]
    runs_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "scripted")]
    provider: ProviderKind,
    /// Script file for the scripted provider.
    #[arg(long, global = true, env = "NARRAFACT_SCRIPT")]
    script: Option<PathBuf>,
    /// Transcript directory for the replay provider (a run's `transcripts/`).
    #[arg(long, global = true)]
    transcripts: Option<PathBuf>,
    /// Concurrent provider calls for the remote provider when not recording.
    #[arg(long, global = true, default_value_t = 4)]
    workers: usize,
    /// Do not keep transcripts of remote calls (allows concurrency).
    #[arg(long, global = true)]
    no_record: bool,
    /// Extraction rounds (applied when a run is created).
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Edge frequency threshold (applied when a run is created).
    #[arg(long, global = true)]
    tau: Option<usize>,
    /// Chunk token budget (applied when a run is created).
    #[arg(long, global = true)]
    chunk_budget: Option<usize>,
    /// Triples retrieved per fact (applied when a run is created).
    #[arg(long, global = true)]
    top_k: Option<usize>,
    /// Refinement step limit (applied when a run is created).
    #[arg(long, global = true)]
    max_iterations: Option<usize>,
    /// Similarity used for retrieval (applied when a run is created).
    #[arg(long, global = true, value_enum)]
    retrieval: Option<RetrievalArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RetrievalArg {
    Embedding,
    Lexical,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    SceneJson,
    PlainText,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportArg {
    ScoreJson,
    GraphJson,
    TextSummary,
}

#[derive(Subcommand)]
enum Command {
    /// Load a narrative and create a run; prints the run id.
    Ingest {
        file: PathBuf,
        /// Defaults to scene_json for .json files, plain_text otherwise.
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// Cut plain text into overlapping windows instead of one scene.
        #[arg(long)]
        windows: bool,
    },
    /// Build the character knowledge graph.
    Kg { run: String },
    /// Draft the summary by hierarchical merging.
    Summarize { run: String },
    /// Score the latest draft.
    Score { run: String },
    /// Refine the latest draft up to N times.
    Refine {
        run: String,
        #[arg(long, default_value_t = 1)]
        iterations: usize,
    },
    /// Print a run record or one of its artifacts.
    Show {
        run: String,
        #[arg(long, value_enum)]
        export: Option<ExportArg>,
        /// Write the artifact here instead of stdout.
        #[arg(long, requires = "export")]
        out: Option<PathBuf>,
    },
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Correlate metric scores with human scores.
    Correlate {
        /// CSV with `unit_id,metric,score`.
        scores: PathBuf,
        /// CSV with `unit_id,human_score`.
        #[arg(long)]
        human: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
        permutations: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Perturb a summary and compare factuality with ROUGE-L.
    Perturb {
        run: String,
        /// Reference summary file; defaults to the run's latest draft.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Pipeline(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParams(_) | Error::RunNotFound(_) => Failure::Usage(e.to_string()),
            other => Failure::Pipeline(other.to_string()),
        }
    }
}

fn provider(g: &Global) -> Result<ProviderSpec, Failure> {
    match g.provider {
        ProviderKind::Scripted => {
            let path = g.script.as_ref().ok_or_else(|| {
                Failure::Usage("--provider scripted needs --script <file>".into())
            })?;
            Ok(ProviderSpec::Scripted(Script::load(path)?))
        }
        ProviderKind::Remote => Ok(ProviderSpec::Remote {
            config: RemoteConfig::from_env()?,
            workers: g.workers.max(1),
            record: !g.no_record,
        }),
        ProviderKind::Replay => {
            let dir = g.transcripts.clone().ok_or_else(|| {
                Failure::Usage("--provider replay needs --transcripts <dir>".into())
            })?;
            Ok(ProviderSpec::Replay { dir })
        }
    }
}

fn config(g: &Global) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    if let Some(r) = g.rounds {
        c.rounds = r;
        c.tau = default_tau(r);
    }
    if let Some(t) = g.tau {
        c.tau = t;
    }
    if let Some(b) = g.chunk_budget {
        c.chunk_budget = b;
    }
    if let Some(k) = g.top_k {
        c.top_k = k;
    }
    if let Some(m) = g.max_iterations {
        c.max_iterations = m;
    }
    if let Some(r) = g.retrieval {
        c.retrieval = match r {
            RetrievalArg::Embedding => RetrievalBackend::Embedding,
            RetrievalArg::Lexical => RetrievalBackend::Lexical,
        };
    }
    c
}

fn read_narrative(
    file: &Path,
    format: Option<FormatArg>,
    windows: bool,
) -> Result<Narrative, Failure> {
    let format = match format {
        Some(FormatArg::SceneJson) => InputFormat::SceneJson,
        Some(FormatArg::PlainText) => InputFormat::PlainText,
        None if file.extension().is_some_and(|e| e == "json") => InputFormat::SceneJson,
        None => InputFormat::PlainText,
    };
    if windows && format == InputFormat::PlainText {
        let text = std::fs::read_to_string(file)
            .map_err(|e| Failure::Pipeline(format!("cannot read {}: {e}", file.display())))?;
        let stem = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "narrative".into());
        return Ok(Narrative::from_plain_windows(
            stem.clone(),
            stem,
            &text,
            DEFAULT_WINDOW,
            DEFAULT_OVERLAP,
        )?);
    }
    Ok(load_narrative(file, format)?)
}

fn print_status(record: &RunRecord) {
    let score = record
        .latest_report()
        .map(|r| format!(" score={:.4} ({}/{})", r.score, r.factual_count, r.z))
        .unwrap_or_default();
    println!("{} stage={}{}", record.run_id, record.stage, score);
}

fn open_app(g: &Global) -> Result<App, Failure> {
    Ok(App::new(RunStore::open(&g.runs_dir)?, provider(g)?))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest {
            file,
            format,
            windows,
        } => {
            let narrative = read_narrative(&file, format, windows)?;
            let store = RunStore::open(&g.runs_dir)?;
            let record = store.create(&narrative, config(g))?;
            println!("{}", record.run_id);
        }
        Command::Kg { run } => print_status(&open_app(g)?.advance(&run, Action::BuildGraph)?),
        Command::Summarize { run } => print_status(&open_app(g)?.advance(&run, Action::Summarize)?),
        Command::Score { run } => print_status(&open_app(g)?.advance(&run, Action::Score)?),
        Command::Refine { run, iterations } => {
            let app = open_app(g)?;
            for _ in 0..iterations {
                let record = app.advance(&run, Action::Refine)?;
                print_status(&record);
                let step = record.steps.last().expect("refine appends a step");
                if step.report_after.is_perfect() || step.output_draft.text == step.input_draft.text
                {
                    break;
                }
            }
        }
        Command::Show { run, export, out } => {
            let store = RunStore::open(&g.runs_dir)?;
            let record = store.load(&run)?;
            let text = match export {
                None => format!(
                    "{}\n",
                    serde_json::to_string_pretty(&record).expect("record serializes")
                ),
                Some(kind) => record.export(match kind {
                    ExportArg::ScoreJson => ExportKind::ScoreJson,
                    ExportArg::GraphJson => ExportKind::GraphJson,
                    ExportArg::TextSummary => ExportKind::TextSummary,
                })?,
            };
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| {
                    Failure::Pipeline(format!("cannot write {}: {e}", path.display()))
                })?,
                None => print!("{text}"),
            }
        }
        Command::Eval(EvalCommand::Correlate {
            scores,
            human,
            permutations,
            seed,
            json,
        }) => {
            let human = load_human_scores(&human)?;
            let series: BTreeMap<_, _> = load_metric_series(&scores, &human)?;
            let report = correlation_report(&series, permutations, seed)?;
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::Eval(EvalCommand::Perturb { run, reference }) => {
            let reference = reference
                .map(|p| {
                    std::fs::read_to_string(&p)
                        .map_err(|e| Failure::Pipeline(format!("cannot read {}: {e}", p.display())))
                })
                .transpose()?;
            let case = open_app(g)?.perturb(&run, reference.as_deref())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&case).expect("case serializes")
            );
        }
        Command::Serve { addr } => {
            let app = Arc::new(open_app(g)?);
            let runtime = tokio::runtime::Runtime::new()
                .map_err(|e| Failure::Pipeline(format!("cannot start runtime: {e}")))?;
            runtime
                .block_on(narrafact_core::app::service::serve(app, addr))
                .map_err(|e| Failure::Pipeline(format!("server error: {e}")))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Pipeline(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
