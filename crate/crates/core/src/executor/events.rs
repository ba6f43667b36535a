//! Append-only, resumable run event log.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RunStarted,
    LayerStarted,
    NodeStarted,
    NodeRetried,
    NodeSucceeded,
    NodeFailed,
    NodeSkipped,
    LayerFinished,
    RunFinished,
    FeedbackEmitted,
    PlanStarted,
    SopsRetrieved,
    ReplanTriggered,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::RunStarted => "run_started",
            EventKind::LayerStarted => "layer_started",
            EventKind::NodeStarted => "node_started",
            EventKind::NodeRetried => "node_retried",
            EventKind::NodeSucceeded => "node_succeeded",
            EventKind::NodeFailed => "node_failed",
            EventKind::NodeSkipped => "node_skipped",
            EventKind::LayerFinished => "layer_finished",
            EventKind::RunFinished => "run_finished",
            EventKind::FeedbackEmitted => "feedback_emitted",
            EventKind::PlanStarted => "plan_started",
            EventKind::SopsRetrieved => "sops_retrieved",
            EventKind::ReplanTriggered => "replan_triggered",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub seq: u64,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub kind: EventKind,
    pub payload: Json,
}

impl RunEvent {
    pub fn node_id(&self) -> Option<&str> {
        self.payload.get("node_id").and_then(Json::as_str)
    }
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Default)]
struct LogState {
    events: Vec<RunEvent>,
    closed: bool,
    sink: Option<File>,
}

/// Events of one run (or one planning episode spanning several attempts).
/// `seq` starts at 1 and is issued under the log's lock.
#[derive(Default)]
pub struct EventLog {
    state: Mutex<LogState>,
    changed: Condvar,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let state = self.state.lock();
        f.debug_struct("EventLog").field("len", &state.events.len()).field("closed", &state.closed).finish()
    }
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mirrors every event to `path` as JSON lines (appending).
    pub fn persisted(path: &Path) -> io::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let log = EventLog::new();
        log.state.lock().sink = Some(file);
        Ok(log)
    }

    pub fn append(&self, kind: EventKind, payload: Json) -> u64 {
        let mut state = self.state.lock();
        let seq = state.events.len() as u64 + 1;
        let event = RunEvent { seq, timestamp: now_ms(), kind, payload };
        if let Some(sink) = state.sink.as_mut() {
            let line = serde_json::to_string(&event).expect("events serialize");
            if let Err(e) = writeln!(sink, "{line}") {
                tracing::warn!("event log write failed: {e}");
            }
        }
        state.events.push(event);
        drop(state);
        self.changed.notify_all();
        seq
    }

    /// Marks the log complete; blocked subscribers drain and end.
    pub fn close(&self) {
        self.state.lock().closed = true;
        self.changed.notify_all();
    }

    pub fn reopen(&self) {
        self.state.lock().closed = false;
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().closed
    }

    pub fn last_seq(&self) -> u64 {
        self.state.lock().events.len() as u64
    }

    /// Events with `seq > from_seq` recorded so far.
    pub fn snapshot(&self, from_seq: u64) -> Vec<RunEvent> {
        let state = self.state.lock();
        state.events.iter().skip(from_seq as usize).cloned().collect()
    }

    /// Blocks up to `timeout` for events past `from_seq`. Returns the batch
    /// and whether the log is closed.
    pub fn wait_after(&self, from_seq: u64, timeout: Duration) -> (Vec<RunEvent>, bool) {
        let mut state = self.state.lock();
        if state.events.len() as u64 <= from_seq && !state.closed {
            self.changed.wait_for(&mut state, timeout);
        }
        let batch = state.events.iter().skip(from_seq as usize).cloned().collect();
        (batch, state.closed)
    }

    /// Blocking iterator over events with `seq > from_seq`, ending once the
    /// log is closed and drained.
    pub fn subscribe(self: &Arc<Self>, from_seq: u64) -> Subscription {
        Subscription { log: self.clone(), next: from_seq }
    }
}

pub struct Subscription {
    log: Arc<EventLog>,
    next: u64,
}

impl Iterator for Subscription {
    type Item = RunEvent;

    fn next(&mut self) -> Option<RunEvent> {
        let mut state = self.log.state.lock();
        loop {
            if let Some(event) = state.events.get(self.next as usize) {
                self.next += 1;
                return Some(event.clone());
            }
            if state.closed {
                return None;
            }
            self.log.changed.wait(&mut state);
        }
    }
}

/// Reads a persisted `events.jsonl`.
pub fn load_events(path: &Path) -> io::Result<Vec<RunEvent>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        out.push(event);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown run {0:?}")]
pub struct UnknownRun(pub String);

/// Event logs addressable by run id.
#[derive(Debug, Default)]
pub struct RunRegistry {
    logs: RwLock<HashMap<String, Arc<EventLog>>>,
}

impl RunRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, run_id: &str, log: Arc<EventLog>) {
        self.logs.write().insert(run_id.to_string(), log);
    }

    pub fn get(&self, run_id: &str) -> Result<Arc<EventLog>, UnknownRun> {
        self.logs.read().get(run_id).cloned().ok_or_else(|| UnknownRun(run_id.to_string()))
    }

    pub fn event_stream(&self, run_id: &str, from_seq: u64) -> Result<Subscription, UnknownRun> {
        Ok(self.get(run_id)?.subscribe(from_seq))
    }
}
