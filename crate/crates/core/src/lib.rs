//! Core of the flowgraph engine: typed node protocol, built-in nodes, plan
//! compilation, static validation, layer planning, parallel execution and
//! the memory-augmented planner.
//!
//! ```no_run
//! use flowgraph_core::{compile, compute_layers, parse_plan, validate, SecretVault};
//! # let registry = flowgraph_core::fixtures::test_registry();
//! let doc = parse_plan(&std::fs::read_to_string("plan.json").unwrap()).unwrap();
//! let graph = compile(&doc, &registry).unwrap();
//! let report = validate(&graph, &SecretVault::new());
//! let layers = compute_layers(&graph).unwrap();
//! println!("{} {}", report.to_json(), layers.to_json());
//! ```

pub mod catalog;
pub mod compiler;
pub mod engine;
pub mod executor;
pub mod fixtures;
pub mod memory;
pub mod nodes;
pub mod optimizer;
pub mod planner;
pub mod protocol;
pub mod validator;

pub use catalog::{CatalogError, SourceCatalog, SourceKind, SourceRegistration};
pub use compiler::{compile, parse_plan, serialize_graph, Binding, CompileError, DagGraph, Edge, ParseError, PlanDocument, PlanNode, PortRef};
pub use executor::{
    build_feedback_trace, classify_error, EventKind, EventLog, Executor, FeedbackTrace, NodeRunRecord, NodeStatus,
    ObjectStore, RetryPolicy, RunConfig, RunEvent, RunState, RunStatus,
};
pub use memory::{embed_text, KnowledgeBase, SharedKnowledgeBase, SopTemplate, WorkingMemory};
pub use nodes::{builtin_registry, BuiltinEnv, ErrorClass, NodeError};
pub use optimizer::{compute_layers, sequentialize, width_stats, ExecutionMode, LayerPlan, WidthStats};
pub use protocol::{check_assignable, NodeRegistry, NodeSpec, Value, ValueKind};
pub use validator::{validate, Diagnostic, DiagnosticCode, SecretVault, Severity, ValidationReport};
pub use engine::{new_id, Analysis, Engine, EngineError, EngineOptions, Episode};
pub use planner::{parse_context_bindings, AnalysisRequest, IntentResolver, PlanError, PlanOutcome, PlanPath, Planner, PlannerConfig, RuleResolver, ScriptedResolver};
