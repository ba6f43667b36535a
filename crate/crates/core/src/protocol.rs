//! Unified node protocol: value kinds, port schemas, node specs, runtime values
//! and the node-type registry.
//!
//! Every node type is described by a [`NodeSpec`] (semantic description, input
//! ports, output ports, config schema, execution kind). The registry binds each
//! spec to an implementation and is read-only once built.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nodes::{AgentAdapter, ToolNode};

/// Closed set of kinds a port or runtime value can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Text,
    Integer,
    Number,
    Boolean,
    Table,
    Document,
    ChartSpec,
    Report,
    Binary,
    Dynamic,
}

impl ValueKind {
    pub const ALL: [ValueKind; 10] = [
        ValueKind::Text,
        ValueKind::Integer,
        ValueKind::Number,
        ValueKind::Boolean,
        ValueKind::Table,
        ValueKind::Document,
        ValueKind::ChartSpec,
        ValueKind::Report,
        ValueKind::Binary,
        ValueKind::Dynamic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ValueKind::Text => "text",
            ValueKind::Integer => "integer",
            ValueKind::Number => "number",
            ValueKind::Boolean => "boolean",
            ValueKind::Table => "table",
            ValueKind::Document => "document",
            ValueKind::ChartSpec => "chart_spec",
            ValueKind::Report => "report",
            ValueKind::Binary => "binary",
            ValueKind::Dynamic => "dynamic",
        }
    }

    pub fn parse(s: &str) -> Option<ValueKind> {
        ValueKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// True iff a value of kind `source` may flow into a port of kind `target`.
///
/// The only widening is into `dynamic`; there is no cross-kind coercion.
pub fn check_assignable(source: ValueKind, target: ValueKind) -> bool {
    source == target || target == ValueKind::Dynamic
}

/// `<Key, Type, Desc>` triplet for one input or output port.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortSchema {
    pub key: String,
    pub kind: ValueKind,
    pub description: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub required: bool,
    /// When set, the port kind is taken from this config field at compile time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind_from_config: Option<String>,
}

impl PortSchema {
    pub fn input(key: &str, kind: ValueKind, description: &str, required: bool) -> Self {
        PortSchema {
            key: key.to_string(),
            kind,
            description: description.to_string(),
            required,
            kind_from_config: None,
        }
    }

    pub fn output(key: &str, kind: ValueKind, description: &str) -> Self {
        PortSchema::input(key, kind, description, false)
    }

    pub fn with_kind_from_config(mut self, field: &str) -> Self {
        self.kind_from_config = Some(field.to_string());
        self
    }
}

/// One static configuration parameter of a node type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigField {
    pub name: String,
    pub kind: ValueKind,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<serde_json::Value>,
    /// Secret-bearing fields are redacted in feedback traces and events.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub secret: bool,
}

impl ConfigField {
    pub fn new(name: &str, kind: ValueKind, description: &str) -> Self {
        ConfigField {
            name: name.to_string(),
            kind,
            description: description.to_string(),
            default: None,
            secret: false,
        }
    }

    pub fn with_default(mut self, default: serde_json::Value) -> Self {
        self.default = Some(default);
        self
    }

    pub fn secret(mut self) -> Self {
        self.secret = true;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionKind {
    Tool,
    Agent,
}

/// The 5-tuple describing a node type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub type_id: String,
    pub semantic_description: String,
    pub inputs: Vec<PortSchema>,
    pub outputs: Vec<PortSchema>,
    #[serde(default)]
    pub config_schema: Vec<ConfigField>,
    pub execution_kind: ExecutionKind,
    #[serde(default)]
    pub required_secrets: Vec<String>,
    /// Sink node types whose outputs are final deliverables.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub terminal: bool,
}

impl NodeSpec {
    pub fn input(&self, key: &str) -> Option<&PortSchema> {
        self.inputs.iter().find(|p| p.key == key)
    }

    pub fn output(&self, key: &str) -> Option<&PortSchema> {
        self.outputs.iter().find(|p| p.key == key)
    }

    pub fn config_field(&self, name: &str) -> Option<&ConfigField> {
        self.config_schema.iter().find(|c| c.name == name)
    }

    /// Checks the structural invariants; returns the first violation.
    pub fn check(&self) -> Result<(), String> {
        if self.type_id.trim().is_empty() {
            return Err("type_id is empty".into());
        }
        if self.semantic_description.trim().is_empty() {
            return Err("semantic_description is empty".into());
        }
        if self.outputs.is_empty() {
            return Err("outputs is empty".into());
        }
        for (side, ports) in [("input", &self.inputs), ("output", &self.outputs)] {
            let mut seen = BTreeSet::new();
            for port in ports.iter() {
                if !is_port_key(&port.key) {
                    return Err(format!("{side} port key {:?} is not a valid identifier", port.key));
                }
                if !seen.insert(port.key.as_str()) {
                    return Err(format!("duplicate {side} port key {:?}", port.key));
                }
                if port.description.trim().is_empty() {
                    return Err(format!("{side} port {:?} has an empty description", port.key));
                }
                if let Some(field) = &port.kind_from_config {
                    if self.config_field(field).is_none() {
                        return Err(format!(
                            "{side} port {:?} takes its kind from unknown config field {field:?}",
                            port.key
                        ));
                    }
                }
            }
        }
        let mut names = BTreeSet::new();
        for field in &self.config_schema {
            if !is_port_key(&field.name) {
                return Err(format!("config field {:?} is not a valid identifier", field.name));
            }
            if !names.insert(field.name.as_str()) {
                return Err(format!("duplicate config field {:?}", field.name));
            }
        }
        Ok(())
    }
}

/// Port keys and config names match `[a-z][a-z0-9_]*`.
pub fn is_port_key(key: &str) -> bool {
    let mut chars = key.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// A table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Null,
    Boolean(bool),
    Number(f64),
    Text(String),
}

impl Scalar {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn render(&self) -> String {
        match self {
            Scalar::Null => String::new(),
            Scalar::Boolean(b) => b.to_string(),
            Scalar::Number(n) => n.to_string(),
            Scalar::Text(s) => s.clone(),
        }
    }
}

/// Named columns over uniform-length rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Scalar>>,
}

impl Table {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<Scalar>>) -> Self {
        Table { columns, rows }
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// A column is numeric when every non-null cell is a number.
    pub fn is_numeric_column(&self, idx: usize) -> bool {
        self.rows
            .iter()
            .all(|r| matches!(r.get(idx), Some(Scalar::Number(_)) | Some(Scalar::Null)))
    }

    pub fn check_shape(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for c in &self.columns {
            if !seen.insert(c.as_str()) {
                return Err(format!("duplicate column name {c:?}"));
            }
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != self.columns.len() {
                return Err(format!(
                    "row {i} has {} cells, expected {}",
                    row.len(),
                    self.columns.len()
                ));
            }
        }
        Ok(())
    }

    /// Renders the table as CSV text (header line first).
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        for row in &self.rows {
            out.push('\n');
            out.push_str(&row.iter().map(Scalar::render).collect::<Vec<_>>().join(","));
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub body: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartMark {
    Bar,
    Line,
    Pie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Encoding {
    pub field: String,
    #[serde(rename = "type")]
    pub kind: String,
}

/// Declarative chart: mark, encodings and inlined data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartSpec {
    pub mark: ChartMark,
    pub title: String,
    pub x: Encoding,
    pub y: Encoding,
    pub data: Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReportSection {
    Text { port: String, body: String },
    Grid { port: String, columns: Vec<String>, rows: Vec<Vec<String>> },
    Chart { port: String, chart_ref: String, title: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub title: String,
    pub sections: Vec<ReportSection>,
}

/// Runtime carrier for port data. Always carries a concrete kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum Value {
    Text(String),
    Integer(i64),
    Number(f64),
    Boolean(bool),
    Table(Table),
    Document(Document),
    ChartSpec(ChartSpec),
    Report(Report),
    Binary(Vec<u8>),
}

impl Value {
    pub fn text(s: impl Into<String>) -> Self {
        Value::Text(s.into())
    }

    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Text(_) => ValueKind::Text,
            Value::Integer(_) => ValueKind::Integer,
            Value::Number(_) => ValueKind::Number,
            Value::Boolean(_) => ValueKind::Boolean,
            Value::Table(_) => ValueKind::Table,
            Value::Document(_) => ValueKind::Document,
            Value::ChartSpec(_) => ValueKind::ChartSpec,
            Value::Report(_) => ValueKind::Report,
            Value::Binary(_) => ValueKind::Binary,
        }
    }

    pub fn check_shape(&self) -> Result<(), String> {
        match self {
            Value::Table(t) => t.check_shape(),
            Value::ChartSpec(c) => {
                c.data.check_shape()?;
                for enc in [&c.x, &c.y] {
                    if c.data.column_index(&enc.field).is_none() {
                        return Err(format!("chart encodes missing column {:?}", enc.field));
                    }
                }
                Ok(())
            }
            Value::Number(n) if !n.is_finite() => Err("number is not finite".into()),
            _ => Ok(()),
        }
    }

    /// Canonical serialized form; the basis of content hashes.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("values always serialize")
    }

    /// Short human-readable preview, at most `max` characters.
    pub fn preview(&self, max: usize) -> String {
        let full = match self {
            Value::Text(s) => s.clone(),
            Value::Table(t) => t.to_csv(),
            Value::Document(d) => d.body.clone(),
            other => other.to_canonical_json(),
        };
        truncate_chars(&full, max)
    }
}

pub(crate) fn truncate_chars(s: &str, max: usize) -> String {
    if s.chars().count() <= max {
        s.to_string()
    } else {
        s.chars().take(max).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValueViolation {
    #[error("kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: ValueKind, found: ValueKind },
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
}

/// Checks a runtime value against a port schema.
pub fn validate_value(value: &Value, schema: &PortSchema) -> Result<(), ValueViolation> {
    if !check_assignable(value.kind(), schema.kind) {
        return Err(ValueViolation::KindMismatch {
            expected: schema.kind,
            found: value.kind(),
        });
    }
    value.check_shape().map_err(ValueViolation::MalformedPayload)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("node type {0:?} is already registered")]
    DuplicateTypeId(String),
    #[error("invalid node spec: {0}")]
    InvalidSpec(String),
}

/// Executable behaviour bound to a registered spec.
#[derive(Clone)]
pub enum NodeImpl {
    Tool(Arc<dyn ToolNode>),
    Agent(Arc<dyn AgentAdapter>),
}

impl NodeImpl {
    pub fn execution_kind(&self) -> ExecutionKind {
        match self {
            NodeImpl::Tool(_) => ExecutionKind::Tool,
            NodeImpl::Agent(_) => ExecutionKind::Agent,
        }
    }
}

impl fmt::Debug for NodeImpl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeImpl::Tool(_) => f.write_str("NodeImpl::Tool"),
            NodeImpl::Agent(_) => f.write_str("NodeImpl::Agent"),
        }
    }
}

#[derive(Debug, Clone)]
struct Registration {
    spec: NodeSpec,
    imp: NodeImpl,
}

/// Node-type registry. Built at startup, shared read-only afterwards.
#[derive(Debug, Clone, Default)]
pub struct NodeRegistry {
    entries: BTreeMap<String, Registration>,
}

impl NodeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: NodeSpec, imp: NodeImpl) -> Result<(), RegistryError> {
        spec.check().map_err(RegistryError::InvalidSpec)?;
        if spec.execution_kind != imp.execution_kind() {
            return Err(RegistryError::InvalidSpec(format!(
                "execution_kind is {:?} but the implementation is {:?}",
                spec.execution_kind,
                imp.execution_kind()
            )));
        }
        if self.entries.contains_key(&spec.type_id) {
            return Err(RegistryError::DuplicateTypeId(spec.type_id));
        }
        self.entries.insert(spec.type_id.clone(), Registration { spec, imp });
        Ok(())
    }

    pub fn lookup(&self, type_id: &str) -> Option<&NodeSpec> {
        self.entries.get(type_id).map(|r| &r.spec)
    }

    pub fn implementation(&self, type_id: &str) -> Option<&NodeImpl> {
        self.entries.get(type_id).map(|r| &r.imp)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All registered specs in type-id order.
    pub fn catalog(&self) -> Vec<NodeSpec> {
        self.entries.values().map(|r| r.spec.clone()).collect()
    }

    pub fn catalog_json(&self) -> String {
        serde_json::to_string(&self.catalog()).expect("specs always serialize")
    }
}
