//! One PASS/FAIL line per acceptance criterion. Runs offline; the live
//! perturbation check is added only when NARRAFACT_CHAT_URL is set.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use common::cases::*;
use common::{fixture, fixture_narrative, fixture_script, kg_inputs};
use http_body_util::BodyExt;
use narrafact_core::app::service::router;
use narrafact_core::app::{Action, App, ExportKind, PipelineConfig, ProviderSpec, RunStore};
use narrafact_core::ckg::{build_names_graph, linearize, select_edges};
use narrafact_core::corpus::segment_plain_text;
use narrafact_core::evalharness::{
    permutation_pvalue, rouge_l, rouge_n, PerturbationCase, ScorePairSeries, Statistic,
};
use narrafact_core::factscore::FactScoreReport;
use narrafact_core::provider::{RemoteConfig, ENV_CHAT_URL};
use narrafact_core::retrieval::RetrievalBackend;
use serde_json::{json, Value};
use tower::ServiceExt;

type Outcome = Result<String, String>;
type Check = (&'static str, Box<dyn FnOnce() -> Outcome>);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn edge_selection() -> Outcome {
    let t = Instant::now();
    run_cases(200, graph_case(), check_edges)?;
    let elapsed = t.elapsed();
    ensure(
        elapsed < Duration::from_secs(5),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!("200 cases in {elapsed:.2?}"))
}

fn names_graph() -> Outcome {
    run_cases(200, alias_case(), check_names_graph)?;
    Ok("200 cases".into())
}

fn linearization() -> Outcome {
    let inputs = kg_inputs();
    let graph = select_edges(
        &inputs.triples,
        &build_names_graph(&inputs.alias_pairs),
        inputs.tau,
    )
    .map_err(|e| e.to_string())?;
    let golden =
        std::fs::read_to_string(fixture("kg_linearized.txt")).map_err(|e| e.to_string())?;
    ensure(
        linearize(&graph) == golden,
        "linearized text differs from golden",
    )?;
    Ok(format!("{} bytes identical", golden.len()))
}

fn scripted_app(dir: &Path, script: &str) -> App {
    App::new(
        RunStore::open(dir).unwrap(),
        ProviderSpec::Scripted(fixture_script(script)),
    )
}

fn report(app: &App, run: &str) -> FactScoreReport {
    serde_json::from_str(&app.export(run, ExportKind::ScoreJson).unwrap()).unwrap()
}

fn scored(name: &str) -> FactScoreReport {
    let tmp = tempfile::tempdir().unwrap();
    let app = scripted_app(tmp.path(), name);
    let run = app
        .create_run(&fixture_narrative(name), PipelineConfig::default())
        .unwrap()
        .run_id;
    for action in [Action::BuildGraph, Action::Summarize, Action::Score] {
        app.advance(&run, action).unwrap();
    }
    report(&app, &run)
}

fn score_arithmetic() -> Outcome {
    let orthanc = scored("orthanc");
    let false_ids: Vec<usize> = orthanc.flagged().map(|v| v.fact.index).collect();
    ensure(
        orthanc.z == 12 && false_ids == [3, 7],
        format!("z={} false={false_ids:?}", orthanc.z),
    )?;
    ensure(
        orthanc.score == 10.0 / 12.0,
        format!("orthanc score {}", orthanc.score),
    )?;
    let mini = scored("mini");
    ensure(
        mini.z == 4 && mini.score == 0.75,
        format!("mini z={} score={}", mini.z, mini.score),
    )?;
    Ok("10/12 and 3/4".into())
}

fn retrieval() -> Outcome {
    for backend in [RetrievalBackend::Lexical, RetrievalBackend::Embedding] {
        run_cases(200, retrieval_case(), |c| check_retrieval(backend, c))
            .map_err(|e| format!("{backend:?}: {e}"))?;
    }
    Ok("200 cases per backend".into())
}

fn chunking() -> Outcome {
    run_cases(200, chunk_case(), check_chunks)?;
    let starts: Vec<_> = segment_plain_text(&scene_text(0, 512), 256, 128)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|c| c.token_start.unwrap())
        .collect();
    ensure(starts == [0, 128, 256], format!("window starts {starts:?}"))?;
    Ok("200 cases; windows at 0/128/256".into())
}

fn statistics() -> Outcome {
    run_cases(500, tied_columns(), check_kendall).map_err(|e| format!("kendall: {e}"))?;
    run_cases(500, tied_columns(), check_spearman).map_err(|e| format!("spearman: {e}"))?;
    run_cases(60, small_columns(), check_exact_pvalue).map_err(|e| format!("p-value: {e}"))?;
    let s = ScorePairSeries::from_values(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0])
        .map_err(|e| e.to_string())?;
    let p = permutation_pvalue(&s, Statistic::Spearman, 10_000, 7).map_err(|e| e.to_string())?;
    ensure((p - 2.0 / 6.0).abs() <= 1e-12, format!("n=3 p={p}"))?;
    Ok("kendall 500, spearman 500, exact p-values".into())
}

fn rouge() -> Outcome {
    let cases = [
        (rouge_n("a b c", "a b d", 1), 200.0 / 3.0),
        (rouge_l("a b c d", "a c b d"), 75.0),
        (rouge_l("a b c", "c b a"), 100.0 / 3.0),
    ];
    for (i, (got, want)) in cases.into_iter().enumerate() {
        let got = got.map_err(|e| e.to_string())?;
        ensure(
            (got - want).abs() < 1e-6,
            format!("case {i}: {got} vs {want}"),
        )?;
    }
    Ok("3 cases".into())
}

fn read_dir_sorted(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn end_to_end() -> Outcome {
    let first = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let app = scripted_app(first.path(), "mini");
    let run = app
        .create_run(&fixture_narrative("mini"), PipelineConfig::default())
        .unwrap()
        .run_id;
    let mut scores = Vec::new();
    for action in [
        Action::BuildGraph,
        Action::Summarize,
        Action::Score,
        Action::Refine,
    ] {
        app.advance(&run, action)
            .map_err(|e| format!("{action}: {e}"))?;
        if matches!(action, Action::Score | Action::Refine) {
            scores.push(report(&app, &run).score);
        }
    }
    let elapsed = t.elapsed();
    ensure(scores == [0.75, 1.0], format!("scores {scores:?}"))?;
    ensure(
        elapsed < Duration::from_secs(2),
        format!("took {elapsed:?}"),
    )?;

    let transcripts = app.store().transcripts_dir(&run).unwrap();
    let second = tempfile::tempdir().unwrap();
    let replay = App::new(
        RunStore::open(second.path()).unwrap(),
        ProviderSpec::Replay {
            dir: transcripts.clone(),
        },
    );
    let rerun = replay
        .create_run(&fixture_narrative("mini"), PipelineConfig::default())
        .unwrap()
        .run_id;
    for action in [
        Action::BuildGraph,
        Action::Summarize,
        Action::Score,
        Action::Refine,
    ] {
        replay
            .advance(&rerun, action)
            .map_err(|e| format!("replay {action}: {e}"))?;
    }
    for kind in [
        ExportKind::GraphJson,
        ExportKind::TextSummary,
        ExportKind::ScoreJson,
    ] {
        ensure(
            app.export(&run, kind).unwrap() == replay.export(&rerun, kind).unwrap(),
            format!("{kind:?} differs on replay"),
        )?;
    }
    ensure(
        read_dir_sorted(&transcripts)
            == read_dir_sorted(&replay.store().transcripts_dir(&rerun).unwrap()),
        "transcripts differ on replay",
    )?;
    Ok(format!("0.75 -> 1.0 in {elapsed:.2?}, replay identical"))
}

fn drops(case: &PerturbationCase) -> (f64, f64) {
    (
        case.shift("narrative_fact_score").unwrap().relative_drop(),
        case.shift("rouge_l").unwrap().relative_drop(),
    )
}

fn perturb_with(provider: ProviderSpec) -> Result<PerturbationCase, String> {
    let tmp = tempfile::tempdir().unwrap();
    let app = App::new(RunStore::open(tmp.path()).unwrap(), provider);
    let run = app
        .create_run(&fixture_narrative("mini"), PipelineConfig::default())
        .unwrap()
        .run_id;
    app.advance(&run, Action::BuildGraph)
        .map_err(|e| e.to_string())?;
    let reference = "Gandalf visits Frodo at Bag End and tells him the Ring belongs to Sauron. \
                     Sauron is pursuing Frodo while Frodo flees the Shire with Sam.";
    app.perturb(&run, Some(reference))
        .map_err(|e| e.to_string())
}

fn perturbation_scripted() -> Outcome {
    let (nfs, rl) = drops(&perturb_with(ProviderSpec::Scripted(fixture_script(
        "mini",
    )))?);
    ensure(
        nfs > rl,
        format!("nfs drop {nfs:.3} <= rouge-l drop {rl:.3}"),
    )?;
    Ok(format!(
        "scripted: nfs drop {nfs:.3} > rouge-l drop {rl:.3}"
    ))
}

fn perturbation_live() -> Outcome {
    let config = RemoteConfig::from_env().map_err(|e| e.to_string())?;
    let (nfs, rl) = drops(&perturb_with(ProviderSpec::Remote {
        config,
        workers: 1,
        record: true,
    })?);
    ensure(
        nfs > rl,
        format!("nfs drop {nfs:.3} <= rouge-l drop {rl:.3}"),
    )?;
    Ok(format!("live: nfs drop {nfs:.3} > rouge-l drop {rl:.3}"))
}

async fn call(app: &Arc<App>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let res = router(Arc::clone(app)).oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

async fn wait_job(app: &Arc<App>, run: &str, job: &Value) -> Value {
    let id = job["job_id"].as_str().unwrap_or_default();
    for _ in 0..500 {
        let (_, j) = call(app, "GET", &format!("/runs/{run}/jobs/{id}"), None).await;
        if j["status"] != "pending" {
            return j;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    Value::Null
}

async fn service_contract() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let app = Arc::new(scripted_app(tmp.path(), "mini"));
    let narrative: Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("mini/narrative.json")).unwrap())
            .unwrap();
    let (status, rec) = call(
        &app,
        "POST",
        "/runs",
        Some(json!({ "narrative": narrative })),
    )
    .await;
    ensure(status == StatusCode::CREATED, format!("create: {status}"))?;
    let run = rec["run_id"].as_str().unwrap().to_string();
    let actions = format!("/runs/{run}/actions");

    let (status, _) = call(&app, "POST", &actions, Some(json!({ "action": "refine" }))).await;
    ensure(
        status == StatusCode::BAD_REQUEST,
        format!("illegal transition gave {status}"),
    )?;

    let guard = app.store().try_lock(&run).map_err(|e| e.to_string())?;
    let (status, _) = call(
        &app,
        "POST",
        &actions,
        Some(json!({ "action": "build_graph" })),
    )
    .await;
    ensure(
        status == StatusCode::CONFLICT,
        format!("concurrent advance gave {status}"),
    )?;
    drop(guard);

    let (_, job) = call(
        &app,
        "POST",
        &actions,
        Some(json!({ "action": "build_graph" })),
    )
    .await;
    ensure(
        wait_job(&app, &run, &job).await["status"] == "done",
        "build_graph did not finish",
    )?;
    let (_, before) = call(&app, "GET", &format!("/runs/{run}"), None).await;

    app.store().set_crash_hook(Some(Arc::new(|p: &Path| {
        p.file_name()
            .is_some_and(|n| n.to_string_lossy().starts_with("drafts-"))
    })));
    let (_, job) = call(
        &app,
        "POST",
        &actions,
        Some(json!({ "action": "summarize" })),
    )
    .await;
    let job = wait_job(&app, &run, &job).await;
    app.store().set_crash_hook(None);
    ensure(
        job["status"] == "failed",
        format!("crashed job ended as {}", job["status"]),
    )?;
    let (status, after) = call(&app, "GET", &format!("/runs/{run}"), None).await;
    ensure(
        status == StatusCode::OK,
        format!("record unreadable after crash: {status}"),
    )?;
    ensure(
        after["stage"] == "graph_built" && after["graph"] == before["graph"],
        "record changed by crashed write",
    )?;
    Ok("400 / 409 / crash keeps prior record".into())
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|_| {}));
    let runtime = tokio::runtime::Runtime::new().expect("runtime");
    let mut checks: Vec<Check> = vec![
        (
            "edge selection matches frequency oracle",
            Box::new(edge_selection),
        ),
        (
            "names graph matches union-find oracle",
            Box::new(names_graph),
        ),
        ("linearization golden text", Box::new(linearization)),
        ("score arithmetic", Box::new(score_arithmetic)),
        ("retrieval matches exhaustive scan", Box::new(retrieval)),
        ("chunking", Box::new(chunking)),
        ("statistics oracles", Box::new(statistics)),
        ("rouge hand cases", Box::new(rouge)),
        ("end-to-end golden transcript", Box::new(end_to_end)),
        ("perturbation direction", Box::new(perturbation_scripted)),
        (
            "service contract",
            Box::new(move || runtime.block_on(service_contract())),
        ),
    ];
    if std::env::var_os(ENV_CHAT_URL).is_some() {
        checks.push((
            "perturbation direction (live provider)",
            Box::new(perturbation_live),
        ));
    }

    let mut failed = 0;
    for (name, check) in checks {
        match guarded(check) {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name}: {reason}");
            }
        }
    }
    if std::env::var_os(ENV_CHAT_URL).is_none() {
        println!("note: live perturbation check not run ({ENV_CHAT_URL} unset)");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
