//! Sessions, append-only plan revisions and run records held by the gateway.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use flowgraph_core::{
    AnalysisRequest, DagGraph, Engine, ExecutionMode, LayerPlan, PlanDocument, PlanOutcome, RunState, RunStatus,
    ValidationReport, WorkingMemory,
};
use parking_lot::{Mutex, RwLock};
use serde::Serialize;

use crate::error::ApiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Planner,
}

#[derive(Debug, Clone, Serialize)]
pub struct TranscriptEntry {
    pub role: Role,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan_id: Option<String>,
}

#[derive(Default)]
pub struct SessionState {
    pub memory: WorkingMemory,
    pub transcript: Vec<TranscriptEntry>,
    pub current_plan: Option<String>,
    pub runs: Vec<String>,
    pub in_flight: Option<String>,
    pub turns: u32,
}

pub struct Session {
    pub session_id: String,
    /// Serializes mutations of one session.
    pub guard: tokio::sync::Mutex<()>,
    pub state: Mutex<SessionState>,
}

#[derive(Debug, Serialize)]
pub struct SessionView {
    pub session_id: String,
    pub transcript: Vec<TranscriptEntry>,
    pub current_plan: Option<String>,
    pub runs: Vec<String>,
    pub in_flight: Option<String>,
}

impl Session {
    pub fn new(session_id: String) -> Self {
        Session { session_id, guard: tokio::sync::Mutex::new(()), state: Mutex::new(SessionState::default()) }
    }

    pub fn view(&self) -> SessionView {
        let s = self.state.lock();
        SessionView {
            session_id: self.session_id.clone(),
            transcript: s.transcript.clone(),
            current_plan: s.current_plan.clone(),
            runs: s.runs.clone(),
            in_flight: s.in_flight.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Message,
    Edit,
    Resubmit,
    Replan,
}

#[derive(Debug, Clone, Serialize)]
pub struct Revision {
    pub revision: usize,
    pub origin: Origin,
    pub plan: PlanDocument,
    pub graph: DagGraph,
    pub layer_plan: Option<LayerPlan>,
    pub validation: ValidationReport,
    pub runnable: bool,
}

impl Revision {
    pub fn analyze(engine: &Engine, revision: usize, origin: Origin, plan: PlanDocument) -> Result<Self, ApiError> {
        let analysis = engine.analyze(&plan)?;
        Ok(Revision {
            revision,
            origin,
            runnable: analysis.runnable(),
            plan,
            graph: analysis.graph,
            layer_plan: analysis.layers,
            validation: analysis.report,
        })
    }
}

pub struct PlanRecord {
    pub plan_id: String,
    pub session_id: Option<String>,
    pub request: Option<AnalysisRequest>,
    pub outcome: Option<PlanOutcome>,
    pub revisions: Vec<Revision>,
}

impl PlanRecord {
    pub fn latest(&self) -> &Revision {
        self.revisions.last().expect("plans start with a revision")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub run_id: String,
    pub plan_id: String,
    pub session_id: Option<String>,
    pub revision: usize,
    pub mode: ExecutionMode,
    pub status: RunStatus,
    pub replans: u32,
    pub attempts: Vec<RunState>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Everything the HTTP handlers share.
pub struct Gateway {
    pub engine: Arc<Engine>,
    pub sessions: RwLock<HashMap<String, Arc<Session>>>,
    pub plans: RwLock<HashMap<String, PlanRecord>>,
    pub runs: RwLock<HashMap<String, RunRecord>>,
    /// Where uploaded CSV bodies are written.
    pub upload_dir: PathBuf,
    /// Per-subscriber event buffer; a full buffer disconnects the subscriber.
    pub stream_buffer: usize,
}

impl Gateway {
    pub fn new(engine: Engine, upload_dir: PathBuf) -> Self {
        Gateway {
            engine: Arc::new(engine),
            sessions: RwLock::default(),
            plans: RwLock::default(),
            runs: RwLock::default(),
            upload_dir,
            stream_buffer: 1024,
        }
    }

    pub fn with_stream_buffer(mut self, n: usize) -> Self {
        self.stream_buffer = n.max(1);
        self
    }

    pub fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions.read().get(id).cloned().ok_or_else(|| ApiError::UnknownSession(id.to_string()))
    }

    pub fn latest_revision(&self, plan_id: &str) -> Result<Revision, ApiError> {
        self.plans
            .read()
            .get(plan_id)
            .map(|p| p.latest().clone())
            .ok_or_else(|| ApiError::UnknownPlan(plan_id.to_string()))
    }
}
