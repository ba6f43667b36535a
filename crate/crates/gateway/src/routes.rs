//! HTTP handlers. Engine calls that may block (planning, runs, file IO) run
//! on the blocking pool.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use flowgraph_core::compiler::Binding;
use flowgraph_core::executor::EventLog;
use flowgraph_core::planner::ArchiveOutcome;
use flowgraph_core::{
    new_id, parse_plan, CatalogError, EngineError, ExecutionMode, PlanDocument, PlanPath, RunStatus, Value,
};
use serde::Deserialize;
use serde_json::{json, Value as JsonValue};
use tokio::sync::mpsc;

use crate::error::ApiError;
use crate::state::{Gateway, Origin, PlanRecord, Revision, Role, RunRecord, Session, TranscriptEntry};

type AppState = Arc<Gateway>;
type ApiResult<T> = Result<T, ApiError>;

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/plans", post(submit_plan))
        .route("/plans/{id}", get(get_plan))
        .route("/plans/{id}/validation", get(get_validation))
        .route("/plans/{id}/layers", get(get_layers))
        .route("/plans/{id}/nodes/{node_id}", put(edit_node))
        .route("/runs", post(start_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/events", get(stream_events))
        .route("/sources", get(list_sources).post(register_source))
        .route("/knowledge/documents", post(ingest_document))
        .route("/knowledge/search", get(search_knowledge))
        .route("/artifacts/{id}", get(get_artifact))
        .route("/sops", post(save_sop))
        .route("/catalog", get(get_catalog))
        .with_state(gateway)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(e.to_string()))
}

fn raw_json(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn revision_json(plan_id: &str, rev: &Revision) -> JsonValue {
    json!({
        "plan_id": plan_id,
        "revision": rev.revision,
        "origin": rev.origin,
        "plan": rev.plan,
        "graph": rev.graph,
        "layer_plan": rev.layer_plan,
        "validation": rev.validation,
        "runnable": rev.runnable,
    })
}

// ---- sessions ----

async fn create_session(State(gw): State<AppState>) -> (StatusCode, Json<JsonValue>) {
    let id = new_id("ses");
    gw.sessions.write().insert(id.clone(), Arc::new(Session::new(id.clone())));
    (StatusCode::CREATED, Json(json!({"session_id": id})))
}

async fn get_session(State(gw): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JsonValue>> {
    Ok(Json(json!(gw.session(&id)?.view())))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MessageBody {
    text: String,
}

async fn post_message(State(gw): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<JsonValue>> {
    let body: MessageBody = parse_body(&body)?;
    let session = gw.session(&id)?;
    let _guard = session.guard.lock().await;
    let turn = {
        let s = session.state.lock();
        if let Some(run) = &s.in_flight {
            return Err(ApiError::Conflict(run.clone()));
        }
        s.turns
    };
    let request = gw.engine.parse_request(&id, &body.text, turn)?;

    let (engine, sess, req) = (gw.engine.clone(), session.clone(), request.clone());
    let outcome = blocking(move || {
        let mut state = sess.state.lock();
        engine.planner.plan(&req, &mut state.memory)
    })
    .await??;

    let plan_id = new_id("plan");
    let engine = gw.engine.clone();
    let doc = outcome.plan.clone();
    let revision = blocking(move || Revision::analyze(&engine, 0, Origin::Message, doc)).await??;
    let response = revision_json(&plan_id, &revision);
    let path_label = match &outcome.path {
        PlanPath::Template { sop_id } => format!("template {sop_id}"),
        PlanPath::Synthesized => "synthesized".into(),
    };
    {
        let mut s = session.state.lock();
        s.turns += 1;
        s.transcript.push(TranscriptEntry { role: Role::User, text: body.text, plan_id: None });
        s.transcript.push(TranscriptEntry {
            role: Role::Planner,
            text: format!("plan {plan_id} ({path_label}, {} nodes)", outcome.plan.nodes.len()),
            plan_id: Some(plan_id.clone()),
        });
        s.current_plan = Some(plan_id.clone());
    }
    let path = outcome.path.clone();
    gw.plans.write().insert(
        plan_id.clone(),
        PlanRecord {
            plan_id: plan_id.clone(),
            session_id: Some(id.clone()),
            request: Some(request),
            outcome: Some(outcome),
            revisions: vec![revision],
        },
    );
    let mut response = response;
    response["session_id"] = json!(id);
    response["path"] = json!(path);
    Ok(Json(response))
}

// ---- plans ----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubmitBody {
    #[serde(default)]
    plan_id: Option<String>,
    plan: JsonValue,
}

async fn submit_plan(State(gw): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<JsonValue>)> {
    let body: SubmitBody = parse_body(&body)?;
    let doc = parse_plan(&body.plan.to_string()).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let engine = gw.engine.clone();
    match body.plan_id {
        Some(plan_id) => {
            let next = gw.plans.read().get(&plan_id).map(|p| p.revisions.len()).ok_or_else(|| ApiError::UnknownPlan(plan_id.clone()))?;
            let rev = blocking(move || Revision::analyze(&engine, next, Origin::Resubmit, doc)).await??;
            let response = revision_json(&plan_id, &rev);
            let mut plans = gw.plans.write();
            let record = plans.get_mut(&plan_id).ok_or_else(|| ApiError::UnknownPlan(plan_id.clone()))?;
            let mut rev = rev;
            rev.revision = record.revisions.len();
            record.revisions.push(rev);
            Ok((StatusCode::OK, Json(response)))
        }
        None => {
            let plan_id = new_id("plan");
            let rev = blocking(move || Revision::analyze(&engine, 0, Origin::Resubmit, doc)).await??;
            let response = revision_json(&plan_id, &rev);
            gw.plans.write().insert(
                plan_id.clone(),
                PlanRecord { plan_id: plan_id.clone(), session_id: None, request: None, outcome: None, revisions: vec![rev] },
            );
            Ok((StatusCode::CREATED, Json(response)))
        }
    }
}

async fn get_plan(State(gw): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JsonValue>> {
    let plans = gw.plans.read();
    let record = plans.get(&id).ok_or_else(|| ApiError::UnknownPlan(id.clone()))?;
    let latest = record.latest();
    let mut body = revision_json(&id, latest);
    body["session_id"] = json!(record.session_id);
    body["revisions"] = record
        .revisions
        .iter()
        .map(|r| {
            json!({
                "revision": r.revision,
                "origin": r.origin,
                "document_id": r.plan.plan_id,
                "pass": r.validation.pass,
                "runnable": r.runnable,
                "codes": r.validation.diagnostics.iter().map(|d| d.code).collect::<Vec<_>>(),
            })
        })
        .collect();
    Ok(Json(body))
}

/// Exact `ValidationReport` bytes of the latest revision.
async fn get_validation(State(gw): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(raw_json(gw.latest_revision(&id)?.validation.to_json()))
}

#[derive(Deserialize)]
struct LayersQuery {
    #[serde(default)]
    mode: Option<String>,
}

/// Exact `LayerPlan` bytes of the latest revision.
async fn get_layers(State(gw): State<AppState>, Path(id): Path<String>, Query(q): Query<LayersQuery>) -> ApiResult<Response> {
    let mode = parse_mode(q.mode.as_deref())?;
    let rev = gw.latest_revision(&id)?;
    let layers = rev.layer_plan.ok_or_else(|| ApiError::ValidationFailed(rev.validation.clone()))?;
    let layers = match mode {
        ExecutionMode::Parallel => layers,
        ExecutionMode::Sequential => flowgraph_core::sequentialize(&layers),
    };
    Ok(raw_json(layers.to_json()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodePatch {
    #[serde(default)]
    config: BTreeMap<String, JsonValue>,
    #[serde(default)]
    literals: BTreeMap<String, Option<Value>>,
}

/// Config values set to null fall back to the field default; null literals unbind.
fn apply_patch(doc: &mut PlanDocument, node_id: &str, patch: NodePatch) -> ApiResult<()> {
    let node = doc.node_mut(node_id).ok_or_else(|| ApiError::UnknownNode(node_id.to_string()))?;
    for (key, value) in patch.config {
        if value.is_null() {
            node.config.remove(&key);
        } else {
            node.config.insert(key, value);
        }
    }
    for (port, value) in patch.literals {
        if let Some(Binding::Ref(r)) = node.inputs.get(&port) {
            return Err(ApiError::MalformedPatch(format!(
                "input {port:?} is wired to {r}; rewiring needs a full plan resubmission"
            )));
        }
        match value {
            Some(v) => {
                node.inputs.insert(port, Binding::Literal(v));
            }
            None => {
                node.inputs.remove(&port);
            }
        }
    }
    Ok(())
}

async fn edit_node(
    State(gw): State<AppState>,
    Path((id, node_id)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<Json<JsonValue>> {
    let patch: NodePatch = serde_json::from_slice(&body).map_err(|e| ApiError::MalformedPatch(e.to_string()))?;
    let session = gw.plans.read().get(&id).map(|p| p.session_id.clone()).ok_or_else(|| ApiError::UnknownPlan(id.clone()))?;
    let session = session.map(|s| gw.session(&s)).transpose()?;
    let _guard = match &session {
        Some(s) => Some(s.guard.lock().await),
        None => None,
    };
    let mut doc = gw.latest_revision(&id)?.plan;
    apply_patch(&mut doc, &node_id, patch)?;
    doc.plan_id = flowgraph_core::planner::plan_id_for(&doc);
    let engine = gw.engine.clone();
    let rev = blocking(move || Revision::analyze(&engine, 0, Origin::Edit, doc))
        .await?
        .map_err(|e| match e {
            ApiError::Compile(c) => ApiError::MalformedPatch(c.to_string()),
            other => other,
        })?;
    let mut plans = gw.plans.write();
    let record = plans.get_mut(&id).ok_or_else(|| ApiError::UnknownPlan(id.clone()))?;
    let mut rev = rev;
    rev.revision = record.revisions.len();
    let response = revision_json(&id, &rev);
    record.revisions.push(rev);
    Ok(Json(response))
}

// ---- runs ----

fn parse_mode(mode: Option<&str>) -> ApiResult<ExecutionMode> {
    match mode {
        None => Ok(ExecutionMode::Parallel),
        Some(m) => ExecutionMode::parse(m).ok_or_else(|| ApiError::BadRequest(format!("unknown mode {m:?}"))),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunBody {
    plan_id: String,
    #[serde(default)]
    mode: Option<String>,
}

async fn start_run(State(gw): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<JsonValue>)> {
    let body: RunBody = parse_body(&body)?;
    let mode = parse_mode(body.mode.as_deref())?;
    let (session_id, request, outcome) = {
        let plans = gw.plans.read();
        let p = plans.get(&body.plan_id).ok_or_else(|| ApiError::UnknownPlan(body.plan_id.clone()))?;
        (p.session_id.clone(), p.request.clone(), p.outcome.clone())
    };
    let session = session_id.as_deref().map(|s| gw.session(s)).transpose()?;
    let _guard = match &session {
        Some(s) => Some(s.guard.lock().await),
        None => None,
    };
    let rev = gw.latest_revision(&body.plan_id)?;
    if !rev.runnable {
        return Err(ApiError::ValidationFailed(rev.validation));
    }
    let run_id = new_id("run");
    if let Some(s) = &session {
        let mut st = s.state.lock();
        if let Some(r) = &st.in_flight {
            return Err(ApiError::Conflict(r.clone()));
        }
        st.in_flight = Some(run_id.clone());
        st.runs.push(run_id.clone());
    }
    let log = gw.engine.open_log(&run_id).map_err(|e| ApiError::Internal(e.to_string()))?;
    gw.runs.write().insert(
        run_id.clone(),
        RunRecord {
            run_id: run_id.clone(),
            plan_id: body.plan_id.clone(),
            session_id: session_id.clone(),
            revision: rev.revision,
            mode,
            status: RunStatus::Running,
            replans: 0,
            attempts: vec![],
            error: None,
        },
    );

    let (gw2, rid, pid, sess) = (gw.clone(), run_id.clone(), body.plan_id.clone(), session.clone());
    tokio::task::spawn_blocking(move || {
        execute_run(&gw2, &rid, &pid, rev, sess, request, outcome, mode, &log);
        log.close();
    });
    Ok((StatusCode::ACCEPTED, Json(json!({"run_id": run_id, "plan_id": body.plan_id, "mode": mode}))))
}

#[allow(clippy::too_many_arguments)]
fn execute_run(
    gw: &Gateway,
    run_id: &str,
    plan_id: &str,
    rev: Revision,
    session: Option<Arc<Session>>,
    request: Option<flowgraph_core::AnalysisRequest>,
    outcome: Option<flowgraph_core::PlanOutcome>,
    mode: ExecutionMode,
    log: &EventLog,
) {
    let engine = &gw.engine;
    let (attempts, replans, error, new_revisions) = match (&session, &request) {
        (Some(session), Some(request)) => {
            if let Some(outcome) = &outcome {
                engine.log_planning(log, request, outcome);
            }
            let mut memory = std::mem::take(&mut session.state.lock().memory);
            let episode = engine.run_with_correction(run_id, request, rev.plan.clone(), &mut memory, mode, log);
            session.state.lock().memory = memory;
            let revised: Vec<PlanDocument> = episode.plans.iter().skip(1).cloned().collect();
            (episode.runs, episode.replans, episode.error.map(|e| e.to_string()), revised)
        }
        _ => {
            let analysis = flowgraph_core::Analysis {
                graph: rev.graph.clone(),
                report: rev.validation.clone(),
                layers: rev.layer_plan.clone(),
            };
            let state = engine.execute(run_id, &analysis, mode, &engine.run_config(), log);
            (vec![state], 0, None, vec![])
        }
    };

    if !new_revisions.is_empty() {
        let mut plans = gw.plans.write();
        if let Some(record) = plans.get_mut(plan_id) {
            for doc in new_revisions {
                match Revision::analyze(engine, record.revisions.len(), Origin::Replan, doc) {
                    Ok(r) => record.revisions.push(r),
                    Err(e) => tracing::warn!("replanned revision not recorded: {e}"),
                }
            }
        }
    }
    let status = attempts.last().map(|s| s.status).unwrap_or(RunStatus::Failed);
    if let Some(r) = gw.runs.write().get_mut(run_id) {
        r.status = status;
        r.replans = replans;
        r.attempts = attempts;
        r.error = error;
    }
    if let Some(s) = session {
        s.state.lock().in_flight = None;
    }
}

async fn get_run(State(gw): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JsonValue>> {
    let runs = gw.runs.read();
    let run = runs.get(&id).ok_or_else(|| ApiError::UnknownRun(id.clone()))?;
    Ok(Json(json!(run)))
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    from_seq: u64,
    #[serde(default)]
    follow: Option<bool>,
}

fn event_line(event: &flowgraph_core::executor::RunEvent) -> String {
    let mut line = serde_json::to_string(event).expect("events serialize");
    line.push('\n');
    line
}

/// Copies events into the subscriber's channel. A full channel means the
/// consumer fell behind; it is disconnected and may resume by seq.
fn pump(log: Arc<EventLog>, mut next: u64, tx: mpsc::Sender<String>) {
    loop {
        let (batch, closed) = log.wait_after(next, Duration::from_millis(200));
        for event in &batch {
            next = event.seq;
            match tx.try_send(event_line(event)) {
                Ok(()) => {}
                Err(mpsc::error::TrySendError::Full(_)) => {
                    tracing::info!("event subscriber too slow; disconnecting at seq {next}");
                    return;
                }
                Err(mpsc::error::TrySendError::Closed(_)) => return,
            }
        }
        if closed || tx.is_closed() {
            return;
        }
    }
}

/// NDJSON, one event per line, in seq order. With `follow` (the default)
/// the response stays open until the run's log is closed.
async fn stream_events(State(gw): State<AppState>, Path(id): Path<String>, Query(q): Query<EventsQuery>) -> ApiResult<Response> {
    let log = gw.engine.runs.get(&id).map_err(|_| ApiError::UnknownRun(id.clone()))?;
    let ndjson = [(header::CONTENT_TYPE, "application/x-ndjson")];
    if q.follow == Some(false) {
        let body: String = log.snapshot(q.from_seq).iter().map(event_line).collect();
        return Ok((ndjson, body).into_response());
    }
    let (tx, rx) = mpsc::channel(gw.stream_buffer);
    let from = q.from_seq;
    tokio::task::spawn_blocking(move || pump(log, from, tx));
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        rx.recv().await.map(|line| (Ok::<_, Infallible>(line), rx))
    });
    Ok((ndjson, Body::from_stream(stream)).into_response())
}

// ---- sources and knowledge ----

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum SourceKindBody {
    Csv,
    KnowledgeCollection,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceBody {
    name: String,
    kind: SourceKindBody,
    #[serde(default)]
    path: Option<String>,
    /// Inline CSV text, stored in the upload directory.
    #[serde(default)]
    content: Option<String>,
}

fn engine_error(e: EngineError) -> ApiError {
    match e {
        EngineError::Catalog(CatalogError::DuplicateName(n)) => ApiError::DuplicateName(n),
        EngineError::Catalog(CatalogError::InvalidName(n)) => ApiError::BadRequest(format!("invalid source name {n:?}")),
        EngineError::Source(err) => ApiError::SourceParse(err.to_string()),
        EngineError::Io(err) => ApiError::SourceParse(err.to_string()),
        other => ApiError::Internal(other.to_string()),
    }
}

async fn register_source(State(gw): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<JsonValue>)> {
    let body: SourceBody = parse_body(&body)?;
    if gw.engine.catalog.contains(&body.name) {
        return Err(ApiError::DuplicateName(body.name));
    }
    let gw2 = gw.clone();
    let reg = blocking(move || match body.kind {
        SourceKindBody::KnowledgeCollection => gw2.engine.register_collection(&body.name).map_err(engine_error),
        SourceKindBody::Csv => {
            let path = match (body.path, body.content) {
                (_, Some(content)) => {
                    if !flowgraph_core::catalog::is_binding_name(&body.name) {
                        return Err(ApiError::BadRequest(format!("invalid source name {:?}", body.name)));
                    }
                    std::fs::create_dir_all(&gw2.upload_dir).map_err(|e| ApiError::Internal(e.to_string()))?;
                    let path = gw2.upload_dir.join(format!("{}.csv", body.name));
                    std::fs::write(&path, content).map_err(|e| ApiError::Internal(e.to_string()))?;
                    path
                }
                (Some(p), None) => p.into(),
                (None, None) => return Err(ApiError::BadRequest("csv sources need a path or content".into())),
            };
            gw2.engine.register_csv(&body.name, &path).map_err(engine_error)
        }
    })
    .await??;
    Ok((StatusCode::CREATED, Json(json!(reg))))
}

async fn list_sources(State(gw): State<AppState>) -> Json<JsonValue> {
    Json(json!(gw.engine.catalog.list()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentBody {
    collection: String,
    text: String,
    #[serde(default)]
    tags: Vec<String>,
}

async fn ingest_document(State(gw): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<JsonValue>)> {
    let body: DocumentBody = parse_body(&body)?;
    let engine = gw.engine.clone();
    let doc_id = blocking(move || engine.ingest_document(&body.collection, &body.text, body.tags))
        .await?
        .map_err(engine_error)?;
    Ok((StatusCode::CREATED, Json(json!({"doc_id": doc_id}))))
}

#[derive(Deserialize)]
struct SearchQuery {
    q: String,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    collection: Option<String>,
}

async fn search_knowledge(State(gw): State<AppState>, Query(q): Query<SearchQuery>) -> Json<JsonValue> {
    let kb = gw.engine.kb.read();
    let hits: Vec<JsonValue> = kb
        .search_knowledge(&q.q, q.k.unwrap_or(3), q.collection.as_deref())
        .into_iter()
        .map(|h| {
            let doc = kb.document(&h.doc_id);
            json!({
                "doc_id": h.doc_id,
                "score": h.score,
                "collection": doc.map(|d| d.collection.as_str()),
                "text": doc.map(|d| d.text.as_str()),
            })
        })
        .collect();
    Json(json!({"hits": hits}))
}

// ---- artifacts, SOPs, catalog ----

async fn get_artifact(State(gw): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JsonValue>> {
    let artifact = gw.engine.executor.store().get(&id).ok_or_else(|| ApiError::UnknownArtifact(id.clone()))?;
    Ok(Json(json!({"meta": artifact.meta, "value": artifact.value})))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SopBody {
    plan_id: String,
    description: String,
}

async fn save_sop(State(gw): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<JsonValue>)> {
    let body: SopBody = parse_body(&body)?;
    let (rev, request) = {
        let plans = gw.plans.read();
        let p = plans.get(&body.plan_id).ok_or_else(|| ApiError::UnknownPlan(body.plan_id.clone()))?;
        (p.latest().clone(), p.request.clone())
    };
    if !rev.validation.pass {
        return Err(ApiError::ValidationFailed(rev.validation));
    }
    let mut plan = rev.plan;
    if let Some(req) = request {
        plan.metadata.entry("bindings".into()).or_insert_with(|| json!(req.bindings));
        plan.metadata.entry("request".into()).or_insert_with(|| json!(req.text));
    }
    let engine = gw.engine.clone();
    let outcome = blocking(move || {
        let outcome = engine.planner.save_sop(&plan, &body.description);
        engine.persist().map(|()| outcome)
    })
    .await?
    .map_err(|e| ApiError::Internal(e.to_string()))?;
    match outcome {
        ArchiveOutcome::Archived { sop_id, new } => {
            Ok((if new { StatusCode::CREATED } else { StatusCode::OK }, Json(json!({"sop_id": sop_id, "new": new}))))
        }
        ArchiveOutcome::Skipped => Err(ApiError::Internal("workflow was not archived".into())),
    }
}

async fn get_catalog(State(gw): State<AppState>) -> Response {
    raw_json(gw.engine.registry.catalog_json())
}
