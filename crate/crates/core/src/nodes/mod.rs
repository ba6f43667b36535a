//! Node execution contracts and the built-in node library.
//!
//! Tool nodes are pure functions of `(inputs, config)`. Agent nodes reason
//! inside a private [`AgentContext`] that is dropped when the invocation ends;
//! only their declared outputs leave the node.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::SourceCatalog;
use crate::memory::SharedKnowledgeBase;
use crate::protocol::{
    ExecutionKind, NodeImpl, NodeRegistry, NodeSpec, RegistryError, ValueKind, ValueViolation,
};
use crate::validator::SecretValue;

mod agent;
mod chart;
mod datasource;
mod instruments;
mod knowledge;
mod report;
mod transform;

pub(crate) use agent::fresh_context;
pub use agent::{
    agent_invoke, AgentContext, BackendError, CompletionBackend, ExtractiveBackend, InternalTool,
    Message, Role, ScriptedBackend, SummarizeAgent, WordCountTool,
};
pub use chart::ChartSpecTool;
pub use datasource::{parse_csv, DatasourceRead};
pub use instruments::{FlakyTool, SleepTool};
pub use knowledge::KnowledgeSearch;
pub use report::ReportRender;
pub use transform::{
    apply_transform, AggOp, Aggregation, CmpOp, Predicate, SortKey, TableTransform, TransformSpec,
};

/// Port key → value.
pub type PortMap = BTreeMap<String, crate::protocol::Value>;
/// Config field → JSON value, already merged with spec defaults.
pub type ConfigMap = BTreeMap<String, serde_json::Value>;

/// Per-invocation view handed to a node implementation.
#[derive(Clone, Default)]
pub struct NodeContext {
    pub run_id: String,
    pub node_id: String,
    pub attempt: u32,
    /// Artifact ids of the upstream values bound to each input port.
    pub input_artifacts: BTreeMap<String, String>,
    secrets: BTreeMap<String, SecretValue>,
}

impl NodeContext {
    pub fn new(run_id: &str, node_id: &str, attempt: u32) -> Self {
        NodeContext {
            run_id: run_id.to_string(),
            node_id: node_id.to_string(),
            attempt,
            ..Default::default()
        }
    }

    pub fn with_secrets(mut self, secrets: BTreeMap<String, SecretValue>) -> Self {
        self.secrets = secrets;
        self
    }

    /// Only the secrets the node type declared are visible here.
    pub fn secret(&self, key: &str) -> Option<&SecretValue> {
        self.secrets.get(key)
    }
}

impl fmt::Debug for NodeContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NodeContext")
            .field("run_id", &self.run_id)
            .field("node_id", &self.node_id)
            .field("attempt", &self.attempt)
            .field("secrets", &self.secrets.keys().collect::<Vec<_>>())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Transient,
    Fatal,
}

/// Failure raised by a node implementation (or by the executor on its behalf).
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NodeError {
    #[error("source not registered: {0}")]
    SourceNotRegistered(String),
    #[error("parse error at line {line}: {message}")]
    ParseError { line: u64, message: String },
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("type error: column {column:?} must be {expected}")]
    TypeError { column: String, expected: ValueKind },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing input {0:?}")]
    MissingInput(String),
    #[error("report has no bound sections")]
    EmptyReport,
    #[error("injected transient failure (attempt {attempt})")]
    InjectedTransient { attempt: u32 },
    #[error("injected fatal failure (attempt {attempt})")]
    InjectedFatal { attempt: u32 },
    #[error("timeout: {0}")]
    Timeout(String),
    #[error("agent budget of {budget} backend calls exhausted")]
    BudgetExhausted { budget: u32 },
    #[error("agent produced nonconforming output: {0}")]
    SchemaViolationByAgent(String),
    #[error("input {port:?} violates its schema: {violation}")]
    InputSchema { port: String, violation: ValueViolation },
    #[error("output violates its schema: {0}")]
    OutputSchema(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("io error: {0}")]
    Io(String),
}

impl NodeError {
    /// Errors the node explicitly tags as retryable.
    pub fn is_tagged_transient(&self) -> bool {
        matches!(
            self,
            NodeError::Timeout(_)
                | NodeError::BudgetExhausted { .. }
                | NodeError::InjectedTransient { .. }
        )
    }
}

/// Deterministic operator: `outputs = f(inputs, config)`.
pub trait ToolNode: Send + Sync {
    fn execute(&self, ctx: &NodeContext, inputs: &PortMap, config: &ConfigMap)
        -> Result<PortMap, NodeError>;
}

/// Reasoning node running inside its own [`AgentContext`].
pub trait AgentAdapter: Send + Sync {
    fn invoke(
        &self,
        inputs: &PortMap,
        config: &ConfigMap,
        ctx: &mut AgentContext,
    ) -> Result<PortMap, NodeError>;

    /// Tools visible only inside the agent.
    fn internal_tools(&self) -> Vec<Arc<dyn InternalTool>> {
        Vec::new()
    }
}

pub(crate) fn cfg_str<'a>(config: &'a ConfigMap, key: &str) -> Result<&'a str, NodeError> {
    config
        .get(key)
        .and_then(|v| v.as_str())
        .ok_or_else(|| NodeError::InvalidConfig(format!("{key} must be a string")))
}

pub(crate) fn cfg_u64(config: &ConfigMap, key: &str) -> Result<u64, NodeError> {
    config
        .get(key)
        .and_then(|v| v.as_u64())
        .ok_or_else(|| NodeError::InvalidConfig(format!("{key} must be a non-negative integer")))
}

pub(crate) fn input<'a>(
    inputs: &'a PortMap,
    key: &str,
) -> Result<&'a crate::protocol::Value, NodeError> {
    inputs.get(key).ok_or_else(|| NodeError::MissingInput(key.to_string()))
}

/// Shared state the built-in nodes close over.
#[derive(Clone)]
pub struct BuiltinEnv {
    pub catalog: Arc<SourceCatalog>,
    pub kb: SharedKnowledgeBase,
    pub agent_backend: Arc<dyn CompletionBackend>,
}

impl BuiltinEnv {
    pub fn new(catalog: Arc<SourceCatalog>, kb: SharedKnowledgeBase) -> Self {
        BuiltinEnv { catalog, kb, agent_backend: Arc::new(ExtractiveBackend::default()) }
    }

    pub fn with_agent_backend(mut self, backend: Arc<dyn CompletionBackend>) -> Self {
        self.agent_backend = backend;
        self
    }
}

/// Spec + implementation pairs for every shipped node type.
pub fn builtin_nodes(env: &BuiltinEnv) -> Vec<(NodeSpec, NodeImpl)> {
    vec![
        (DatasourceRead::spec(), NodeImpl::Tool(Arc::new(DatasourceRead::new(env.catalog.clone())))),
        (TableTransform::spec(), NodeImpl::Tool(Arc::new(TableTransform))),
        (KnowledgeSearch::spec(), NodeImpl::Tool(Arc::new(KnowledgeSearch::new(env.kb.clone())))),
        (ChartSpecTool::spec(), NodeImpl::Tool(Arc::new(ChartSpecTool))),
        (ReportRender::spec(), NodeImpl::Tool(Arc::new(ReportRender))),
        (SleepTool::spec(), NodeImpl::Tool(Arc::new(SleepTool))),
        (FlakyTool::spec(), NodeImpl::Tool(Arc::new(FlakyTool::default()))),
        (
            SummarizeAgent::spec(),
            NodeImpl::Agent(Arc::new(SummarizeAgent::new(env.agent_backend.clone()))),
        ),
    ]
}

/// Registry pre-populated with the built-in node library.
pub fn builtin_registry(env: &BuiltinEnv) -> Result<NodeRegistry, RegistryError> {
    let mut registry = NodeRegistry::new();
    for (spec, imp) in builtin_nodes(env) {
        registry.register(spec, imp)?;
    }
    Ok(registry)
}

pub(crate) fn tool_spec(
    type_id: &str,
    description: &str,
    inputs: Vec<crate::protocol::PortSchema>,
    outputs: Vec<crate::protocol::PortSchema>,
    config_schema: Vec<crate::protocol::ConfigField>,
) -> NodeSpec {
    NodeSpec {
        type_id: type_id.to_string(),
        semantic_description: description.to_string(),
        inputs,
        outputs,
        config_schema,
        execution_kind: ExecutionKind::Tool,
        required_secrets: Vec::new(),
        terminal: false,
    }
}
