//! Test nodes and graph builders shared by unit tests, integration tests,
//! benchmarks and the acceptance suite.

use std::sync::Arc;

use serde_json::json;

use crate::catalog::SourceCatalog;
use crate::compiler::{DagGraph, Edge, NodeInstance, PortRef};
use crate::memory::KnowledgeBase;
use crate::nodes::{builtin_registry, cfg_u64, BuiltinEnv, ConfigMap, NodeContext, NodeError, PortMap, ToolNode};
use crate::protocol::{ConfigField, ExecutionKind, NodeImpl, NodeRegistry, NodeSpec, PortSchema, Value, ValueKind};

/// Passes its inputs through as text. Config: `sleep_ms`, `fail` (fatal).
pub struct RelayTool;

impl RelayTool {
    pub const TYPE_ID: &'static str = "test.relay";

    pub fn spec() -> NodeSpec {
        NodeSpec {
            type_id: Self::TYPE_ID.into(),
            semantic_description: "Relays its inputs after an optional delay".into(),
            inputs: vec![PortSchema::input("in", ValueKind::Dynamic, "anything", false)],
            outputs: vec![PortSchema::output("out", ValueKind::Text, "node id and input digest")],
            config_schema: vec![
                ConfigField::new("sleep_ms", ValueKind::Integer, "delay before replying").with_default(json!(0)),
                ConfigField::new("fail", ValueKind::Boolean, "fail fatally").with_default(json!(false)),
            ],
            execution_kind: ExecutionKind::Tool,
            required_secrets: vec![],
            terminal: false,
        }
    }
}

impl ToolNode for RelayTool {
    fn execute(&self, ctx: &NodeContext, inputs: &PortMap, config: &ConfigMap) -> Result<PortMap, NodeError> {
        let ms = cfg_u64(config, "sleep_ms")?;
        if ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(ms));
        }
        if config.get("fail").and_then(|v| v.as_bool()) == Some(true) {
            return Err(NodeError::InjectedFatal { attempt: ctx.attempt });
        }
        let parts: Vec<String> = inputs.iter().map(|(k, v)| format!("{k}={}", v.preview(32))).collect();
        Ok(PortMap::from([("out".into(), Value::text(format!("{}[{}]", ctx.node_id, parts.join(";"))))]))
    }
}

/// Declares the `db_password` secret and reports which secrets it can see.
pub struct SecureReadTool;

impl SecureReadTool {
    pub const TYPE_ID: &'static str = "test.secure_read";

    pub fn spec() -> NodeSpec {
        NodeSpec {
            type_id: Self::TYPE_ID.into(),
            semantic_description: "Reads with a credential".into(),
            inputs: vec![],
            outputs: vec![PortSchema::output("visible", ValueKind::Text, "visible secret keys")],
            config_schema: vec![
                ConfigField::new("password_hint", ValueKind::Text, "secret-bearing field").with_default(json!("")).secret(),
                ConfigField::new("fail", ValueKind::Boolean, "fail fatally").with_default(json!(false)),
            ],
            execution_kind: ExecutionKind::Tool,
            required_secrets: vec!["db_password".into()],
            terminal: true,
        }
    }
}

impl ToolNode for SecureReadTool {
    fn execute(&self, ctx: &NodeContext, _inputs: &PortMap, config: &ConfigMap) -> Result<PortMap, NodeError> {
        if config.get("fail").and_then(|v| v.as_bool()) == Some(true) {
            return Err(NodeError::Backend("connection refused".into()));
        }
        let visible: Vec<&str> = ["db_password", "unrelated"].into_iter().filter(|k| ctx.secret(k).is_some()).collect();
        Ok(PortMap::from([("visible".into(), Value::text(visible.join(",")))]))
    }
}

/// Adds the test node types to `registry`.
pub fn register_test_nodes(registry: &mut NodeRegistry) {
    registry.register(RelayTool::spec(), NodeImpl::Tool(Arc::new(RelayTool))).expect("relay registers");
    registry
        .register(SecureReadTool::spec(), NodeImpl::Tool(Arc::new(SecureReadTool)))
        .expect("secure read registers");
}

/// Built-in nodes over an empty catalog and knowledge base, plus test nodes.
pub fn test_registry() -> NodeRegistry {
    let env = BuiltinEnv::new(Arc::new(SourceCatalog::new()), KnowledgeBase::shared());
    let mut registry = builtin_registry(&env).expect("builtins register");
    register_test_nodes(&mut registry);
    registry
}

/// Relay graph with one `from_<src>` input per incoming edge. Node ids may
/// be anything; self-loops and cycles are allowed (for validator tests).
pub fn graph_from_edges(ids: &[&str], edges: &[(&str, &str)]) -> DagGraph {
    relay_graph(ids, edges, |_| 0)
}

/// Like [`graph_from_edges`], with a per-node sleep in milliseconds.
pub fn relay_graph(ids: &[&str], edges: &[(&str, &str)], sleep_ms: impl Fn(&str) -> u64) -> DagGraph {
    let instances = ids
        .iter()
        .map(|id| {
            let mut spec = RelayTool::spec();
            spec.inputs.clear();
            let mut sources: Vec<&str> = edges.iter().filter(|(_, to)| to == id).map(|(from, _)| *from).collect();
            sources.sort_unstable();
            sources.dedup();
            for src in sources {
                spec.inputs.push(PortSchema::input(&format!("from_{src}"), ValueKind::Dynamic, "upstream", true));
            }
            spec.terminal = true;
            NodeInstance {
                node_id: id.to_string(),
                spec,
                config: ConfigMap::from([
                    ("sleep_ms".to_string(), json!(sleep_ms(id))),
                    ("fail".to_string(), json!(false)),
                ]),
                literals: Default::default(),
            }
        })
        .collect();
    let mut edge_list: Vec<Edge> = edges
        .iter()
        .map(|(from, to)| Edge { from: PortRef::new(from, "out"), to: PortRef::new(to, &format!("from_{from}")) })
        .collect();
    edge_list.sort();
    edge_list.dedup();
    DagGraph::new("g", instances, edge_list)
}

/// Sales records used by the end-to-end scenario.
pub const DEMO_SALES_CSV: &str = "\
region,product,quarter,amt
EU,widget,Q1,120.5
US,widget,Q1,98
APAC,gadget,Q1,45.25
EU,gadget,Q2,80
US,gadget,Q2,130
APAC,widget,Q2,60.75
EU,widget,Q3,110
US,widget,Q3,142.5
";

/// Knowledge documents ingested into the `financial_metrics` collection.
pub const DEMO_DOCS: [&str; 2] = [
    "Gross margin is revenue minus cost of goods sold, divided by revenue. Quarterly sales performance is compared by region.",
    "Year over year growth compares 2025 sales against 2024 sales for the same region and product line.",
];

pub const DEMO_MESSAGE: &str = "Help me analyze the 2025 global sales performance @sales_db @financial_metrics";
pub const DEMO_FOLLOWUP: &str = "Help me analyze the 2025 global sales performance by region @sales_db @financial_metrics";

/// Engine over `dir/runs` and `dir/kb` with the demo sources registered.
/// Reopening an existing directory keeps its sources.
pub fn demo_engine(dir: &std::path::Path, resolver: Arc<dyn crate::planner::IntentResolver>) -> crate::engine::Engine {
    demo_engine_with(dir, resolver, crate::engine::EngineOptions::default())
}

pub fn demo_engine_with(
    dir: &std::path::Path,
    resolver: Arc<dyn crate::planner::IntentResolver>,
    mut options: crate::engine::EngineOptions,
) -> crate::engine::Engine {
    options.runs_dir.get_or_insert_with(|| dir.join("runs"));
    options.kb_dir.get_or_insert_with(|| dir.join("kb"));
    let engine = crate::engine::Engine::new(options, resolver, crate::validator::SecretVault::new()).expect("engine starts");
    if !engine.catalog.contains("sales_db") {
        let csv = dir.join("sales.csv");
        std::fs::write(&csv, DEMO_SALES_CSV).expect("write demo csv");
        engine.register_csv("sales_db", &csv).expect("register demo csv");
    }
    for doc in DEMO_DOCS {
        engine.ingest_document("financial_metrics", doc, vec![]).expect("ingest demo doc");
    }
    engine
}

/// The branching demo workflow, aggregating `measure` per region.
pub fn demo_plan(measure: &str) -> crate::compiler::PlanDocument {
    use crate::compiler::{PlanDocument, PlanNode};
    let request = "Help me analyze the 2025 global sales performance";
    let total = format!("sum_{measure}");
    PlanDocument::new(
        "demo",
        vec![
            PlanNode::new("read_source", "datasource.read").literal("source", Value::text("sales_db")),
            PlanNode::new("transform", "table.transform")
                .config("group_by", json!(["region"]))
                .config("aggregations", json!([{"op": "sum", "column": measure}]))
                .config("sort", json!({"column": total, "descending": true}))
                .link("data", "read_source", "rows"),
            PlanNode::new("chart", "chart.spec")
                .config("chart_type", json!("bar"))
                .config("x", json!("region"))
                .config("y", json!(total))
                .config("title", json!(request))
                .link("data", "transform", "rows"),
            PlanNode::new("search_knowledge", "knowledge.search")
                .config("collection", json!("financial_metrics"))
                .config("k", json!(3))
                .literal("query", Value::text(request)),
            PlanNode::new("report", "report.render")
                .config("title", json!(request))
                .link("table", "transform", "rows")
                .link("chart", "chart", "chart")
                .link("context", "search_knowledge", "snippets"),
        ],
    )
}

/// Two independent sleeps of `ms` milliseconds.
pub fn sleep_plan(ms: u64) -> crate::compiler::PlanDocument {
    use crate::compiler::{PlanDocument, PlanNode};
    PlanDocument::new(
        "sleep-fixture",
        vec![
            PlanNode::new("sleep_a", "util.sleep").config("duration_ms", json!(ms)),
            PlanNode::new("sleep_b", "util.sleep").config("duration_ms", json!(ms)),
        ],
    )
}
