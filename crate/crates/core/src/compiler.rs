//! Plan documents and their compilation into typed DAGs.
//!
//! Wire format (UTF-8 JSON):
//!
//! ```json
//! {"plan_id": "p1",
//!  "nodes": [{"id": "read", "type_id": "datasource.read",
//!             "inputs": {"source": {"literal": {"kind": "text", "payload": "sales_db"}}}},
//!            {"id": "chart", "type_id": "chart.spec", "config": {"x": "region", "y": "amt"},
//!             "inputs": {"data": {"ref": "read.rows"}}}],
//!  "metadata": {}}
//! ```
//!
//! Edges are implied by `ref` bindings; unknown fields are rejected.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::nodes::ConfigMap;
use crate::protocol::{NodeRegistry, NodeSpec, Value, ValueKind};

/// `nodeId.portKey` reference.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PortRef {
    pub node: String,
    pub port: String,
}

impl PortRef {
    pub fn new(node: &str, port: &str) -> Self {
        PortRef { node: node.to_string(), port: port.to_string() }
    }
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.node, self.port)
    }
}

impl FromStr for PortRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('.') {
            Some((node, port)) if is_node_id(node) && !port.is_empty() && !port.contains('.') => {
                Ok(PortRef::new(node, port))
            }
            _ => Err(format!("invalid reference {s:?}: expected \"nodeId.portKey\"")),
        }
    }
}

impl Serialize for PortRef {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PortRef {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Node ids: `[A-Za-z0-9_-]+` (no dots, so refs split unambiguously).
pub fn is_node_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    Literal(Value),
    Ref(PortRef),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanNode {
    pub id: String,
    pub type_id: String,
    #[serde(default)]
    pub config: ConfigMap,
    #[serde(default)]
    pub inputs: BTreeMap<String, Binding>,
}

impl PlanNode {
    pub fn new(id: &str, type_id: &str) -> Self {
        PlanNode { id: id.to_string(), type_id: type_id.to_string(), config: ConfigMap::new(), inputs: BTreeMap::new() }
    }

    pub fn config(mut self, key: &str, value: serde_json::Value) -> Self {
        self.config.insert(key.to_string(), value);
        self
    }

    pub fn literal(mut self, port: &str, value: Value) -> Self {
        self.inputs.insert(port.to_string(), Binding::Literal(value));
        self
    }

    pub fn link(mut self, port: &str, node: &str, out_port: &str) -> Self {
        self.inputs.insert(port.to_string(), Binding::Ref(PortRef::new(node, out_port)));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDocument {
    pub plan_id: String,
    pub nodes: Vec<PlanNode>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl PlanDocument {
    pub fn new(plan_id: &str, nodes: Vec<PlanNode>) -> Self {
        PlanDocument { plan_id: plan_id.to_string(), nodes, metadata: BTreeMap::new() }
    }

    pub fn node(&self, id: &str) -> Option<&PlanNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut PlanNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn ref_count(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| n.inputs.values())
            .filter(|b| matches!(b, Binding::Ref(_)))
            .count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plans serialize")
    }

    /// Same nodes, ignoring plan id and metadata.
    pub fn same_structure(&self, other: &PlanDocument) -> bool {
        self.nodes == other.nodes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    SyntaxError { line: usize, column: usize, message: String },
    #[error("duplicate node id {0:?}")]
    DuplicateNodeId(String),
    #[error("missing field {0}")]
    MissingField(String),
    #[error("unknown field {0}")]
    UnknownField(String),
    #[error("invalid value at {path}: {message}")]
    Invalid { path: String, message: String },
}

fn join_path(path: &str, field: &str) -> String {
    if path.is_empty() || path == "." {
        field.to_string()
    } else {
        format!("{path}.{field}")
    }
}

fn backticked(message: &str) -> Option<&str> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(&message[start..start + len])
}

/// Parses a serialized plan document.
pub fn parse_plan(raw: &str) -> Result<PlanDocument, ParseError> {
    let de = &mut serde_json::Deserializer::from_str(raw);
    let doc: PlanDocument = match serde_path_to_error::deserialize(de) {
        Ok(doc) => doc,
        Err(err) => {
            let path = err.path().to_string();
            let inner = err.into_inner();
            use serde_json::error::Category;
            if matches!(inner.classify(), Category::Syntax | Category::Eof | Category::Io) {
                return Err(ParseError::SyntaxError {
                    line: inner.line(),
                    column: inner.column(),
                    message: inner.to_string(),
                });
            }
            let message = inner.to_string();
            if message.starts_with("missing field") {
                if let Some(field) = backticked(&message) {
                    return Err(ParseError::MissingField(join_path(&path, field)));
                }
            }
            if message.starts_with("unknown field") {
                // the path already ends at the offending key
                return Err(ParseError::UnknownField(path));
            }
            return Err(ParseError::Invalid { path, message });
        }
    };
    let mut seen = BTreeSet::new();
    for (i, node) in doc.nodes.iter().enumerate() {
        if !is_node_id(&node.id) {
            return Err(ParseError::Invalid {
                path: format!("nodes[{i}].id"),
                message: format!("invalid node id {:?}", node.id),
            });
        }
        if !seen.insert(node.id.as_str()) {
            return Err(ParseError::DuplicateNodeId(node.id.clone()));
        }
    }
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeInstance {
    pub node_id: String,
    /// Spec with config-dependent port kinds already resolved.
    pub spec: NodeSpec,
    pub config: ConfigMap,
    #[serde(default)]
    pub literals: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: PortRef,
    pub to: PortRef,
}

/// Compiled workflow. Instances are id-sorted and edges sorted, so equal
/// graphs serialize to identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DagGraph {
    pub graph_id: String,
    pub instances: Vec<NodeInstance>,
    pub edges: Vec<Edge>,
}

impl DagGraph {
    /// Builds a graph in canonical order.
    pub fn new(graph_id: &str, mut instances: Vec<NodeInstance>, mut edges: Vec<Edge>) -> Self {
        instances.sort_by(|a, b| a.node_id.cmp(&b.node_id));
        edges.sort();
        DagGraph { graph_id: graph_id.to_string(), instances, edges }
    }

    pub fn instance(&self, node_id: &str) -> Option<&NodeInstance> {
        self.instances
            .binary_search_by(|i| i.node_id.as_str().cmp(node_id))
            .ok()
            .map(|idx| &self.instances[idx])
    }

    pub fn node_ids(&self) -> Vec<&str> {
        self.instances.iter().map(|i| i.node_id.as_str()).collect()
    }

    /// Node-level adjacency over instance indices, deduplicated and sorted.
    /// Edges naming unknown nodes are ignored.
    pub fn successors(&self) -> Vec<Vec<usize>> {
        let index: HashMap<&str, usize> =
            self.instances.iter().enumerate().map(|(i, n)| (n.node_id.as_str(), i)).collect();
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); self.instances.len()];
        for e in &self.edges {
            if let (Some(&u), Some(&v)) = (index.get(e.from.node.as_str()), index.get(e.to.node.as_str())) {
                adj[u].insert(v);
            }
        }
        adj.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Edges feeding `node_id`.
    pub fn inbound<'a>(&'a self, node_id: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.to.node == node_id)
    }
}

/// Canonical serialized form of a compiled graph.
pub fn serialize_graph(graph: &DagGraph) -> String {
    let canonical = DagGraph::new(&graph.graph_id, graph.instances.clone(), graph.edges.clone());
    serde_json::to_string(&canonical).expect("graphs serialize")
}

pub fn parse_graph(raw: &str) -> Result<DagGraph, serde_json::Error> {
    let g: DagGraph = serde_json::from_str(raw)?;
    Ok(DagGraph::new(&g.graph_id, g.instances, g.edges))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error("node {node:?}: unknown node type {type_id:?}")]
    UnknownNodeType { node: String, type_id: String },
    #[error("node {node:?} port {port:?}: reference to missing node {target:?}")]
    DanglingRef { node: String, port: String, target: String },
    #[error("node {node:?}: unknown port {key:?}")]
    UnknownPort { node: String, key: String },
    #[error("node {node:?}: unknown config field {field:?}")]
    UnknownConfigField { node: String, field: String },
    #[error("node {node:?}: missing config field {field:?}")]
    MissingConfig { node: String, field: String },
    #[error("node {node:?}: config field {field:?}: {message}")]
    InvalidConfig { node: String, field: String, message: String },
}

impl CompileError {
    /// `(node id, port or config key)` the error points at.
    pub fn location(&self) -> (&str, &str) {
        match self {
            CompileError::UnknownNodeType { node, type_id } => (node, type_id),
            CompileError::DanglingRef { node, port, .. } => (node, port),
            CompileError::UnknownPort { node, key } => (node, key),
            CompileError::UnknownConfigField { node, field }
            | CompileError::MissingConfig { node, field }
            | CompileError::InvalidConfig { node, field, .. } => (node, field),
        }
    }
}

fn config_matches_kind(value: &serde_json::Value, kind: ValueKind) -> bool {
    use serde_json::Value as J;
    match kind {
        ValueKind::Text => value.is_string(),
        ValueKind::Integer => value.is_i64() || value.is_u64(),
        ValueKind::Number => value.is_number(),
        ValueKind::Boolean => value.is_boolean(),
        ValueKind::Dynamic => true,
        _ => !matches!(value, J::Null),
    }
}

fn resolve_config(node: &PlanNode, spec: &NodeSpec) -> Result<ConfigMap, CompileError> {
    if let Some(field) = node.config.keys().find(|k| spec.config_field(k).is_none()) {
        return Err(CompileError::UnknownConfigField { node: node.id.clone(), field: field.clone() });
    }
    let mut resolved = ConfigMap::new();
    for field in &spec.config_schema {
        let value = match (node.config.get(&field.name), &field.default) {
            (Some(v), _) => v.clone(),
            (None, Some(d)) => d.clone(),
            (None, None) => {
                return Err(CompileError::MissingConfig { node: node.id.clone(), field: field.name.clone() })
            }
        };
        let nullable = matches!(field.default, Some(serde_json::Value::Null));
        if !(value.is_null() && nullable) && !config_matches_kind(&value, field.kind) {
            return Err(CompileError::InvalidConfig {
                node: node.id.clone(),
                field: field.name.clone(),
                message: format!("expected {}", field.kind),
            });
        }
        resolved.insert(field.name.clone(), value);
    }
    Ok(resolved)
}

fn resolve_spec(node: &PlanNode, spec: &NodeSpec, config: &ConfigMap) -> Result<NodeSpec, CompileError> {
    let mut resolved = spec.clone();
    for port in resolved.inputs.iter_mut().chain(resolved.outputs.iter_mut()) {
        if let Some(field) = port.kind_from_config.take() {
            let kind = config
                .get(&field)
                .and_then(|v| v.as_str())
                .and_then(ValueKind::parse)
                .filter(|k| *k != ValueKind::Dynamic)
                .ok_or_else(|| CompileError::InvalidConfig {
                    node: node.id.clone(),
                    field: field.clone(),
                    message: "expected a concrete value kind name".into(),
                })?;
            port.kind = kind;
        }
    }
    Ok(resolved)
}

/// Instantiates every node against the registry and turns refs into edges.
pub fn compile(doc: &PlanDocument, registry: &NodeRegistry) -> Result<DagGraph, CompileError> {
    let mut instances = Vec::with_capacity(doc.nodes.len());
    for node in &doc.nodes {
        let spec = registry.lookup(&node.type_id).ok_or_else(|| CompileError::UnknownNodeType {
            node: node.id.clone(),
            type_id: node.type_id.clone(),
        })?;
        let config = resolve_config(node, spec)?;
        let spec = resolve_spec(node, spec, &config)?;
        instances.push(NodeInstance { node_id: node.id.clone(), spec, config, literals: BTreeMap::new() });
    }

    let mut edges = Vec::new();
    for (idx, node) in doc.nodes.iter().enumerate() {
        for (port, binding) in &node.inputs {
            if instances[idx].spec.input(port).is_none() {
                return Err(CompileError::UnknownPort { node: node.id.clone(), key: port.clone() });
            }
            match binding {
                Binding::Literal(value) => {
                    instances[idx].literals.insert(port.clone(), value.clone());
                }
                Binding::Ref(target) => {
                    let source = instances.iter().find(|i| i.node_id == target.node).ok_or_else(|| {
                        CompileError::DanglingRef {
                            node: node.id.clone(),
                            port: port.clone(),
                            target: target.to_string(),
                        }
                    })?;
                    if source.spec.output(&target.port).is_none() {
                        return Err(CompileError::UnknownPort { node: target.node.clone(), key: target.port.clone() });
                    }
                    edges.push(Edge { from: target.clone(), to: PortRef::new(&node.id, port) });
                }
            }
        }
    }
    Ok(DagGraph::new(&doc.plan_id, instances, edges))
}
