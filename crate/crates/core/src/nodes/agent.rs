use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{cfg_u64, input, AgentAdapter, ConfigMap, NodeError, PortMap};
use crate::protocol::{
    validate_value, ConfigField, Document, ExecutionKind, NodeSpec, PortSchema, Value, ValueKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Message { role, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend timed out: {0}")]
    Timeout(String),
    #[error("backend failed: {0}")]
    Failed(String),
}

impl From<BackendError> for NodeError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Timeout(m) => NodeError::Timeout(m),
            BackendError::Failed(m) => NodeError::Backend(m),
        }
    }
}

/// Text-completion backend consulted by agent nodes.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, messages: &[Message]) -> Result<String, BackendError>;
}

/// A tool only visible inside an agent's private context.
pub trait InternalTool: Send + Sync {
    fn name(&self) -> &str;
    fn call(&self, argument: &str) -> String;
}

pub struct WordCountTool;

impl InternalTool for WordCountTool {
    fn name(&self) -> &str {
        "word_count"
    }

    fn call(&self, argument: &str) -> String {
        argument.split_whitespace().count().to_string()
    }
}

/// Private working context of one agent invocation. Dropped when the node
/// completes; nothing in it is visible to the planner or the object store.
pub struct AgentContext {
    local_messages: Vec<Message>,
    internal_tools: Vec<Arc<dyn InternalTool>>,
    budget: u32,
    calls: u32,
}

impl AgentContext {
    pub fn new(budget: u32, internal_tools: Vec<Arc<dyn InternalTool>>) -> Self {
        AgentContext { local_messages: Vec::new(), internal_tools, budget, calls: 0 }
    }

    pub fn push(&mut self, role: Role, content: impl Into<String>) {
        self.local_messages.push(Message::new(role, content));
    }

    pub fn messages(&self) -> &[Message] {
        &self.local_messages
    }

    pub fn calls(&self) -> u32 {
        self.calls
    }

    pub fn tool_names(&self) -> Vec<&str> {
        self.internal_tools.iter().map(|t| t.name()).collect()
    }

    /// One backend call, charged against the budget.
    pub fn complete(&mut self, backend: &dyn CompletionBackend) -> Result<String, NodeError> {
        if self.calls >= self.budget {
            return Err(NodeError::BudgetExhausted { budget: self.budget });
        }
        self.calls += 1;
        Ok(backend.complete(&self.local_messages)?)
    }

    pub fn call_tool(&self, name: &str, argument: &str) -> Option<String> {
        self.internal_tools.iter().find(|t| t.name() == name).map(|t| t.call(argument))
    }
}

impl fmt::Debug for AgentContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AgentContext")
            .field("messages", &self.local_messages.len())
            .field("budget", &self.budget)
            .field("calls", &self.calls)
            .finish()
    }
}

/// Runs an agent adapter and enforces its declared output schema. The
/// context is consumed here and discarded with the invocation.
pub fn agent_invoke(
    adapter: &dyn AgentAdapter,
    spec: &NodeSpec,
    inputs: &PortMap,
    config: &ConfigMap,
    mut context: AgentContext,
) -> Result<PortMap, NodeError> {
    let outputs = adapter.invoke(inputs, config, &mut context)?;
    drop(context);
    for key in outputs.keys() {
        if spec.output(key).is_none() {
            return Err(NodeError::SchemaViolationByAgent(format!("undeclared output port {key:?}")));
        }
    }
    for port in &spec.outputs {
        let value = outputs
            .get(&port.key)
            .ok_or_else(|| NodeError::SchemaViolationByAgent(format!("missing output port {:?}", port.key)))?;
        validate_value(value, port)
            .map_err(|v| NodeError::SchemaViolationByAgent(format!("port {:?}: {v}", port.key)))?;
    }
    Ok(outputs)
}

/// Hex sha256 of the serialized message list; the key scripted replies use.
pub fn message_hash(messages: &[Message]) -> String {
    let bytes = serde_json::to_vec(messages).expect("messages serialize");
    hex::encode(Sha256::digest(bytes))
}

/// Test double: replies keyed by message hash, then a FIFO of fallbacks.
#[derive(Default)]
pub struct ScriptedBackend {
    keyed: HashMap<String, String>,
    queue: Mutex<VecDeque<String>>,
    seen: Mutex<Vec<Vec<Message>>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_replies<I: IntoIterator<Item = S>, S: Into<String>>(replies: I) -> Self {
        let backend = Self::default();
        backend.queue.lock().extend(replies.into_iter().map(Into::into));
        backend
    }

    pub fn on(mut self, messages: &[Message], reply: impl Into<String>) -> Self {
        self.keyed.insert(message_hash(messages), reply.into());
        self
    }

    /// Every message list the backend has been shown.
    pub fn transcripts(&self) -> Vec<Vec<Message>> {
        self.seen.lock().clone()
    }
}

impl CompletionBackend for ScriptedBackend {
    fn complete(&self, messages: &[Message]) -> Result<String, BackendError> {
        self.seen.lock().push(messages.to_vec());
        if let Some(reply) = self.keyed.get(&message_hash(messages)) {
            return Ok(reply.clone());
        }
        self.queue
            .lock()
            .pop_front()
            .ok_or_else(|| BackendError::Failed("no scripted reply".into()))
    }
}

/// Offline default: answers with the leading lines of the supplied context.
pub struct ExtractiveBackend {
    max_lines: usize,
}

impl Default for ExtractiveBackend {
    fn default() -> Self {
        ExtractiveBackend { max_lines: 3 }
    }
}

impl CompletionBackend for ExtractiveBackend {
    fn complete(&self, messages: &[Message]) -> Result<String, BackendError> {
        let last = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| BackendError::Failed("no user message".into()))?;
        let context = last.content.split_once(CONTEXT_MARKER).map(|(_, c)| c).unwrap_or(&last.content);
        let lines: Vec<&str> = context.lines().map(str::trim).filter(|l| !l.is_empty()).take(self.max_lines).collect();
        Ok(format!("FINAL {}", lines.join("\n")))
    }
}

const CONTEXT_MARKER: &str = "\nContext:\n";

const SUMMARIZE_PROMPT: &str = "You summarize analysis context for a report. \
Reply `TOOL <name> <argument>` to call an internal tool, or `FINAL <summary>` to answer.";

/// Agent node that condenses a context document into a summary document.
pub struct SummarizeAgent {
    backend: Arc<dyn CompletionBackend>,
}

impl SummarizeAgent {
    pub const TYPE_ID: &'static str = "agent.summarize";

    pub fn new(backend: Arc<dyn CompletionBackend>) -> Self {
        SummarizeAgent { backend }
    }

    pub fn spec() -> NodeSpec {
        NodeSpec {
            type_id: Self::TYPE_ID.into(),
            semantic_description: "Sub-agent that reads context documents and writes a narrative summary".into(),
            inputs: vec![
                PortSchema::input("context", ValueKind::Document, "Material to summarize", true),
                PortSchema::input("question", ValueKind::Text, "The question the summary should answer", false),
            ],
            outputs: vec![PortSchema::output("summary", ValueKind::Document, "Narrative summary")],
            config_schema: vec![ConfigField::new("budget", ValueKind::Integer, "Maximum backend calls per invocation")
                .with_default(json!(4))],
            execution_kind: ExecutionKind::Agent,
            required_secrets: vec![],
            terminal: false,
        }
    }
}

impl AgentAdapter for SummarizeAgent {
    fn invoke(&self, inputs: &PortMap, _config: &ConfigMap, ctx: &mut AgentContext) -> Result<PortMap, NodeError> {
        let context = match input(inputs, "context")? {
            Value::Document(d) => d.body.clone(),
            other => other.preview(4096),
        };
        let question = match inputs.get("question") {
            Some(Value::Text(q)) => q.clone(),
            _ => "Summarize the material.".to_string(),
        };
        ctx.push(Role::System, format!("{SUMMARIZE_PROMPT} Tools: {}.", ctx.tool_names().join(", ")));
        ctx.push(Role::User, format!("Question: {question}{CONTEXT_MARKER}{context}"));
        loop {
            let reply = ctx.complete(self.backend.as_ref())?;
            ctx.push(Role::Assistant, reply.clone());
            if let Some(call) = reply.strip_prefix("TOOL ") {
                let (name, arg) = call.split_once(' ').unwrap_or((call, ""));
                let result = ctx
                    .call_tool(name, arg)
                    .unwrap_or_else(|| format!("error: unknown tool {name}"));
                ctx.push(Role::Tool, result);
                continue;
            }
            let summary = reply.strip_prefix("FINAL ").unwrap_or(&reply).trim().to_string();
            let doc = Document {
                body: summary,
                metadata: [("question".to_string(), json!(question))].into_iter().collect(),
            };
            return Ok(PortMap::from([("summary".to_string(), Value::Document(doc))]));
        }
    }

    fn internal_tools(&self) -> Vec<Arc<dyn InternalTool>> {
        vec![Arc::new(WordCountTool)]
    }
}

/// Builds the context an invocation of `adapter` starts with.
pub(crate) fn fresh_context(adapter: &dyn AgentAdapter, config: &ConfigMap) -> AgentContext {
    let budget = cfg_u64(config, "budget").unwrap_or(4).min(u32::MAX as u64) as u32;
    AgentContext::new(budget, adapter.internal_tools())
}
