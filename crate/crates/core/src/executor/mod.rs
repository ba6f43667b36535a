//! Layered scheduler: dispatches each layer onto a bounded worker pool,
//! retries transient failures with exponential backoff, and records
//! everything in an append-only event log.

use std::collections::{BTreeMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::compiler::DagGraph;
use crate::nodes::{
    agent_invoke, fresh_context, ConfigMap, ErrorClass, NodeContext, NodeError, PortMap,
};
use crate::optimizer::{ExecutionMode, LayerPlan};
use crate::protocol::{validate_value, NodeImpl, NodeRegistry, NodeSpec, ValueKind};
use crate::validator::{validate, SecretVault, ValidationReport};

mod events;
mod store;

pub use events::{load_events, EventKind, EventLog, RunEvent, RunRegistry, Subscription, UnknownRun};
pub(crate) use events::now_ms;
pub use store::{artifact_id, content_hash, Artifact, ArtifactMeta, ObjectStore, Producer};

/// Preview length used in feedback traces and input summaries.
pub const PREVIEW_CHARS: usize = 256;

/// Root of the run directory: `FLOWGRAPH_RUNS_DIR`, else `./runs`.
pub fn runs_dir_from_env() -> PathBuf {
    std::env::var_os("FLOWGRAPH_RUNS_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Event log for `run_id`, mirrored to `<runs_dir>/<run_id>/events.jsonl`
/// when a directory is given.
pub fn open_run_log(runs_dir: Option<&Path>, run_id: &str) -> std::io::Result<EventLog> {
    match runs_dir {
        Some(dir) => EventLog::persisted(&dir.join(run_id).join("events.jsonl")),
        None => Ok(EventLog::new()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_backoff: Duration,
    /// Adds up to 50% random delay on top of each backoff.
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, base_backoff: Duration::from_millis(100), jitter: false }
    }
}

impl RetryPolicy {
    pub fn with_max_retries(mut self, n: u32) -> Self {
        self.max_retries = n;
        self
    }

    pub fn with_base_backoff(mut self, base: Duration) -> Self {
        self.base_backoff = base;
        self
    }

    /// Delay before the retry following failed attempt `attempt` (1-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        let delay = self.base_backoff.saturating_mul(factor);
        if self.jitter {
            let nanos = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.subsec_nanos())
                .unwrap_or(0);
            delay + delay.mul_f64(f64::from(nanos % 1000) / 2000.0)
        } else {
            delay
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub policy: RetryPolicy,
    /// `None` picks `min(widest layer, 4)`.
    pub worker_cap: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Succeeded,
    Failed,
    Rejected,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Pending => "pending",
            RunStatus::Running => "running",
            RunStatus::Succeeded => "succeeded",
            RunStatus::Failed => "failed",
            RunStatus::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Waiting,
    Ready,
    Running,
    Succeeded,
    FailedTransientRetrying,
    FailedFatal,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub class: ErrorClass,
    pub message: String,
    pub trace: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub port: String,
    pub kind: ValueKind,
    pub preview: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub artifact_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRunRecord {
    pub node_id: String,
    pub type_id: String,
    pub layer: usize,
    pub status: NodeStatus,
    pub attempts: u32,
    pub outputs: BTreeMap<String, String>,
    pub last_error: Option<ErrorRecord>,
    pub inputs: Vec<InputSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub graph_id: String,
    pub status: RunStatus,
    pub mode: ExecutionMode,
    pub node_records: BTreeMap<String, NodeRunRecord>,
    pub started_ms: u64,
    pub finished_ms: u64,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<ValidationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackTrace>,
}

impl RunState {
    pub fn record(&self, node_id: &str) -> Option<&NodeRunRecord> {
        self.node_records.get(node_id)
    }

    pub fn nodes_with(&self, status: NodeStatus) -> Vec<&str> {
        self.node_records.values().filter(|r| r.status == status).map(|r| r.node_id.as_str()).collect()
    }

    /// Every produced artifact id, as `(node, port, id)`.
    pub fn artifacts(&self) -> Vec<(&str, &str, &str)> {
        self.node_records
            .values()
            .flat_map(|r| r.outputs.iter().map(move |(p, id)| (r.node_id.as_str(), p.as_str(), id.as_str())))
            .collect()
    }
}

/// Transient iff the node tagged the error as retryable.
pub fn classify_error(error: &NodeError) -> ErrorClass {
    if error.is_tagged_transient() {
        ErrorClass::Transient
    } else {
        ErrorClass::Fatal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpstreamSummary {
    pub node_id: String,
    pub port: String,
    pub artifact_id: String,
    pub kind: ValueKind,
    pub preview: String,
}

/// What the planner gets back from a failed run. Carries no secret values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackTrace {
    pub run_id: String,
    pub node_id: String,
    pub type_id: String,
    pub error_class: ErrorClass,
    pub error_message: String,
    pub attempts: u32,
    /// Config with secret fields replaced by `***`.
    pub config: ConfigMap,
    /// Declared secret keys, each mapped to `***`.
    pub secrets: BTreeMap<String, String>,
    pub inputs: Vec<InputSummary>,
    pub upstream: Vec<UpstreamSummary>,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("run did not fail")]
    NotFailed,
}

pub const REDACTED: &str = "***";

/// Trace for the first failed node in layer order.
pub fn build_feedback_trace(state: &RunState, graph: &DagGraph, store: &ObjectStore) -> Result<FeedbackTrace, TraceError> {
    if state.status != RunStatus::Failed {
        return Err(TraceError::NotFailed);
    }
    let record = state
        .node_records
        .values()
        .filter(|r| r.status == NodeStatus::FailedFatal)
        .min_by(|a, b| (a.layer, &a.node_id).cmp(&(b.layer, &b.node_id)))
        .ok_or(TraceError::NotFailed)?;
    let error = record.last_error.clone().unwrap_or(ErrorRecord {
        class: ErrorClass::Fatal,
        message: "unknown failure".into(),
        trace: String::new(),
    });
    let instance = graph.instance(&record.node_id);
    let mut config = instance.map(|i| i.config.clone()).unwrap_or_default();
    let mut secrets = BTreeMap::new();
    if let Some(inst) = instance {
        for field in inst.spec.config_schema.iter().filter(|f| f.secret) {
            if let Some(v) = config.get_mut(&field.name) {
                *v = json!(REDACTED);
            }
            secrets.insert(field.name.clone(), REDACTED.to_string());
        }
        for key in &inst.spec.required_secrets {
            secrets.insert(key.clone(), REDACTED.to_string());
        }
    }
    let upstream = graph
        .inbound(&record.node_id)
        .filter_map(|e| {
            let id = state.record(&e.from.node)?.outputs.get(&e.from.port)?;
            let artifact = store.get(id)?;
            Some(UpstreamSummary {
                node_id: e.from.node.clone(),
                port: e.from.port.clone(),
                artifact_id: id.clone(),
                kind: artifact.value.kind(),
                preview: artifact.value.preview(PREVIEW_CHARS),
            })
        })
        .collect();
    Ok(FeedbackTrace {
        run_id: state.run_id.clone(),
        node_id: record.node_id.clone(),
        type_id: record.type_id.clone(),
        error_class: error.class,
        error_message: error.message,
        attempts: record.attempts,
        config,
        secrets,
        inputs: record.inputs.clone(),
        upstream,
        skipped: state.nodes_with(NodeStatus::Skipped).into_iter().map(String::from).collect(),
    })
}

struct Task {
    node_id: String,
    spec: NodeSpec,
    imp: Option<NodeImpl>,
    config: ConfigMap,
    inputs: PortMap,
    ctx: NodeContext,
}

enum WorkerMsg {
    Started { node: String, attempt: u32 },
    Retried { node: String, attempt: u32, error: NodeError, delay: Duration },
    Finished { node: String, attempts: u32, result: Result<PortMap, NodeError> },
}

fn invoke_once(task: &Task, attempt: u32) -> Result<PortMap, NodeError> {
    let imp = task
        .imp
        .as_ref()
        .ok_or_else(|| NodeError::Backend(format!("no implementation registered for {}", task.spec.type_id)))?;
    for (port, value) in &task.inputs {
        if let Some(schema) = task.spec.input(port) {
            validate_value(value, schema)
                .map_err(|violation| NodeError::InputSchema { port: port.clone(), violation })?;
        }
    }
    let mut ctx = task.ctx.clone();
    ctx.attempt = attempt;
    let outcome = catch_unwind(AssertUnwindSafe(|| match imp {
        NodeImpl::Tool(tool) => tool.execute(&ctx, &task.inputs, &task.config),
        NodeImpl::Agent(adapter) => {
            let context = fresh_context(adapter.as_ref(), &task.config);
            agent_invoke(adapter.as_ref(), &task.spec, &task.inputs, &task.config, context)
        }
    }));
    let outputs = outcome.unwrap_or_else(|_| Err(NodeError::Backend(format!("node {} panicked", task.node_id))))?;
    for port in &task.spec.outputs {
        let value = outputs
            .get(&port.key)
            .ok_or_else(|| NodeError::OutputSchema(format!("missing output {:?}", port.key)))?;
        validate_value(value, port).map_err(|v| NodeError::OutputSchema(format!("port {:?}: {v}", port.key)))?;
    }
    if let Some(extra) = outputs.keys().find(|k| task.spec.output(k).is_none()) {
        return Err(NodeError::OutputSchema(format!("undeclared output {extra:?}")));
    }
    Ok(outputs)
}

fn run_with_retries(task: Task, policy: &RetryPolicy, tx: &mpsc::Sender<WorkerMsg>) {
    let node = task.node_id.clone();
    let mut attempt = 1;
    loop {
        let _ = tx.send(WorkerMsg::Started { node: node.clone(), attempt });
        match invoke_once(&task, attempt) {
            Err(error) if classify_error(&error) == ErrorClass::Transient && attempt <= policy.max_retries => {
                let delay = policy.backoff(attempt);
                let _ = tx.send(WorkerMsg::Retried { node: node.clone(), attempt, error, delay });
                std::thread::sleep(delay);
                attempt += 1;
            }
            result => {
                let _ = tx.send(WorkerMsg::Finished { node, attempts: attempt, result });
                return;
            }
        }
    }
}

/// True when `plan` partitions the graph's nodes and every edge points to a
/// strictly later layer.
pub fn plan_matches_graph(graph: &DagGraph, plan: &LayerPlan) -> bool {
    let mut layer_of = BTreeMap::new();
    for (k, layer) in plan.layers.iter().enumerate() {
        for id in layer {
            if layer_of.insert(id.as_str(), k).is_some() {
                return false;
            }
        }
    }
    layer_of.len() == graph.instances.len()
        && graph.instances.iter().all(|i| layer_of.contains_key(i.node_id.as_str()))
        && graph.edges.iter().all(|e| {
            matches!((layer_of.get(e.from.node.as_str()), layer_of.get(e.to.node.as_str())), (Some(u), Some(v)) if u < v)
        })
}

/// Runs compiled graphs against a registry and a shared artifact store.
#[derive(Clone)]
pub struct Executor {
    registry: Arc<NodeRegistry>,
    store: Arc<ObjectStore>,
}

impl Executor {
    pub fn new(registry: Arc<NodeRegistry>, store: Arc<ObjectStore>) -> Self {
        Executor { registry, store }
    }

    pub fn registry(&self) -> &Arc<NodeRegistry> {
        &self.registry
    }

    pub fn store(&self) -> &Arc<ObjectStore> {
        &self.store
    }

    /// Validates, then runs `plan` layer by layer. Never panics on node
    /// failure; the outcome is encoded in the returned state.
    pub fn execute(
        &self,
        run_id: &str,
        graph: &DagGraph,
        plan: &LayerPlan,
        vault: &SecretVault,
        config: &RunConfig,
        log: &EventLog,
    ) -> RunState {
        let clock = Instant::now();
        let mut state = RunState {
            run_id: run_id.to_string(),
            graph_id: graph.graph_id.clone(),
            status: RunStatus::Pending,
            mode: plan.mode,
            node_records: BTreeMap::new(),
            started_ms: now_ms(),
            finished_ms: 0,
            wall_ms: 0,
            validation: None,
            feedback: None,
        };
        log.append(
            EventKind::RunStarted,
            json!({"run_id": run_id, "graph_id": graph.graph_id, "mode": plan.mode, "layers": plan.layers.len()}),
        );

        let report = validate(graph, vault);
        if !report.pass || !plan_matches_graph(graph, plan) {
            let errors = report.errors().count();
            state.status = RunStatus::Rejected;
            state.validation = Some(report);
            self.finish(&mut state, clock, log, json!({"errors": errors}));
            return state;
        }

        state.status = RunStatus::Running;
        for (k, layer) in plan.layers.iter().enumerate() {
            for id in layer {
                let inst = graph.instance(id).expect("plan matches graph");
                state.node_records.insert(
                    id.clone(),
                    NodeRunRecord {
                        node_id: id.clone(),
                        type_id: inst.spec.type_id.clone(),
                        layer: k,
                        status: NodeStatus::Waiting,
                        attempts: 0,
                        outputs: BTreeMap::new(),
                        last_error: None,
                        inputs: Vec::new(),
                    },
                );
            }
        }
        let widest = plan.layers.iter().map(Vec::len).max().unwrap_or(1);
        let cap = config.worker_cap.unwrap_or(widest.min(4)).max(1);

        for (k, layer) in plan.layers.iter().enumerate() {
            log.append(EventKind::LayerStarted, json!({"layer": k, "nodes": layer}));
            let mut tasks = Vec::new();
            for id in layer {
                match self.prepare(&mut state, graph, vault, id) {
                    Ok(task) => tasks.push(task),
                    Err(blocker) => {
                        state.node_records.get_mut(id).expect("record exists").status = NodeStatus::Skipped;
                        log.append(EventKind::NodeSkipped, json!({"node_id": id, "layer": k, "upstream": blocker}));
                    }
                }
            }
            self.dispatch(&mut state, tasks, cap, &config.policy, k, log);
            let count = |s: NodeStatus| layer.iter().filter(|id| state.node_records[*id].status == s).count();
            log.append(
                EventKind::LayerFinished,
                json!({
                    "layer": k,
                    "succeeded": count(NodeStatus::Succeeded),
                    "failed": count(NodeStatus::FailedFatal),
                    "skipped": count(NodeStatus::Skipped),
                }),
            );
        }

        let all_ok = state.node_records.values().all(|r| r.status == NodeStatus::Succeeded);
        state.status = if all_ok { RunStatus::Succeeded } else { RunStatus::Failed };
        if !all_ok {
            if let Ok(trace) = build_feedback_trace(&state, graph, &self.store) {
                log.append(EventKind::FeedbackEmitted, json!({"run_id": run_id, "trace": trace}));
                state.feedback = Some(trace);
            }
        }
        self.finish(&mut state, clock, log, json!({}));
        state
    }

    fn finish(&self, state: &mut RunState, clock: Instant, log: &EventLog, extra: Json) {
        state.wall_ms = clock.elapsed().as_millis() as u64;
        state.finished_ms = now_ms();
        let mut payload = json!({"run_id": state.run_id, "status": state.status, "wall_ms": state.wall_ms});
        if let (Some(p), Json::Object(extra)) = (payload.as_object_mut(), extra) {
            p.extend(extra);
        }
        log.append(EventKind::RunFinished, payload);
    }

    /// Materializes a node's inputs, or names the upstream node that blocks it.
    fn prepare(&self, state: &mut RunState, graph: &DagGraph, vault: &SecretVault, id: &str) -> Result<Task, String> {
        let inst = graph.instance(id).expect("plan matches graph");
        let mut inputs = PortMap::new();
        let mut summaries = Vec::new();
        let mut artifacts = BTreeMap::new();
        for (port, value) in &inst.literals {
            summaries.push(InputSummary {
                port: port.clone(),
                kind: value.kind(),
                preview: value.preview(PREVIEW_CHARS),
                artifact_id: None,
            });
            inputs.insert(port.clone(), value.clone());
        }
        for edge in graph.inbound(id) {
            let upstream = &state.node_records[&edge.from.node];
            if upstream.status != NodeStatus::Succeeded {
                return Err(edge.from.node.clone());
            }
            let artifact = upstream
                .outputs
                .get(&edge.from.port)
                .and_then(|aid| self.store.get(aid))
                .ok_or_else(|| edge.from.node.clone())?;
            summaries.push(InputSummary {
                port: edge.to.port.clone(),
                kind: artifact.value.kind(),
                preview: artifact.value.preview(PREVIEW_CHARS),
                artifact_id: Some(artifact.meta.artifact_id.clone()),
            });
            artifacts.insert(edge.to.port.clone(), artifact.meta.artifact_id.clone());
            inputs.insert(edge.to.port.clone(), artifact.value.clone());
        }
        summaries.sort_by(|a, b| a.port.cmp(&b.port));
        let secrets = inst
            .spec
            .required_secrets
            .iter()
            .filter_map(|k| vault.get(k).map(|v| (k.clone(), v)))
            .collect();
        let mut ctx = NodeContext::new(&state.run_id, id, 0).with_secrets(secrets);
        ctx.input_artifacts = artifacts;

        let record = state.node_records.get_mut(id).expect("record exists");
        record.status = NodeStatus::Ready;
        record.inputs = summaries;
        Ok(Task {
            node_id: id.to_string(),
            spec: inst.spec.clone(),
            imp: self.registry.implementation(&inst.spec.type_id).cloned(),
            config: inst.config.clone(),
            inputs,
            ctx,
        })
    }

    fn dispatch(&self, state: &mut RunState, tasks: Vec<Task>, cap: usize, policy: &RetryPolicy, layer: usize, log: &EventLog) {
        if tasks.is_empty() {
            return;
        }
        let workers = cap.min(tasks.len());
        let queue = Mutex::new(VecDeque::from(tasks));
        let (tx, rx) = mpsc::channel();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                let tx = tx.clone();
                let queue = &queue;
                scope.spawn(move || loop {
                    let next = queue.lock().pop_front();
                    match next {
                        Some(task) => run_with_retries(task, policy, &tx),
                        None => break,
                    }
                });
            }
            drop(tx);
            for msg in rx {
                self.apply(state, msg, layer, log);
            }
        });
    }

    fn apply(&self, state: &mut RunState, msg: WorkerMsg, layer: usize, log: &EventLog) {
        match msg {
            WorkerMsg::Started { node, attempt } => {
                let rec = state.node_records.get_mut(&node).expect("record exists");
                rec.status = NodeStatus::Running;
                rec.attempts = attempt;
                log.append(EventKind::NodeStarted, json!({"node_id": node, "layer": layer, "attempt": attempt}));
            }
            WorkerMsg::Retried { node, attempt, error, delay } => {
                let rec = state.node_records.get_mut(&node).expect("record exists");
                rec.status = NodeStatus::FailedTransientRetrying;
                rec.last_error = Some(ErrorRecord {
                    class: ErrorClass::Transient,
                    message: error.to_string(),
                    trace: format!("{error:?}"),
                });
                log.append(
                    EventKind::NodeRetried,
                    json!({"node_id": node, "attempt": attempt, "error": error.to_string(), "delay_ms": delay.as_millis() as u64}),
                );
            }
            WorkerMsg::Finished { node, attempts, result } => {
                let result = result.and_then(|outputs| {
                    outputs
                        .into_iter()
                        .map(|(port, value)| {
                            self.store
                                .put(&state.run_id, &node, &port, value)
                                .map(|id| (port, id))
                                .map_err(|e| NodeError::Io(e.to_string()))
                        })
                        .collect::<Result<BTreeMap<_, _>, _>>()
                });
                let rec = state.node_records.get_mut(&node).expect("record exists");
                rec.attempts = attempts;
                match result {
                    Ok(outputs) => {
                        rec.status = NodeStatus::Succeeded;
                        rec.outputs = outputs;
                        log.append(
                            EventKind::NodeSucceeded,
                            json!({"node_id": node, "attempts": attempts, "outputs": rec.outputs}),
                        );
                    }
                    Err(error) => {
                        let class = classify_error(&error);
                        rec.status = NodeStatus::FailedFatal;
                        rec.last_error =
                            Some(ErrorRecord { class, message: error.to_string(), trace: format!("{error:?}") });
                        log.append(
                            EventKind::NodeFailed,
                            json!({"node_id": node, "attempts": attempts, "class": class, "error": error.to_string()}),
                        );
                    }
                }
            }
        }
    }
}
