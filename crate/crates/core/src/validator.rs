//! Static analysis of compiled graphs. All checks run, nothing short-circuits;
//! the report lists cycles, then schema findings, then completeness findings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compiler::DagGraph;
use crate::protocol::{check_assignable, validate_value};

/// A secret value. Never serialized; `Debug` prints `***`.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretValue(String);

impl SecretValue {
    pub fn new(value: impl Into<String>) -> Self {
        SecretValue(value.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for SecretValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("***")
    }
}

/// Secret store: explicit entries, a `key=value` file, and optionally the
/// process environment. Keys match exactly.
#[derive(Debug, Clone, Default)]
pub struct SecretVault {
    entries: BTreeMap<String, SecretValue>,
    env_fallback: bool,
}

impl SecretVault {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_env_fallback(mut self) -> Self {
        self.env_fallback = true;
        self
    }

    pub fn insert(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), SecretValue::new(value));
    }

    /// Reads `key=value` lines; blank lines and `#` comments are skipped.
    pub fn load_file(&mut self, path: &Path) -> std::io::Result<()> {
        let raw = std::fs::read_to_string(path)?;
        for line in raw.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                self.insert(k.trim(), v.trim());
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<SecretValue> {
        self.entries.get(key).cloned().or_else(|| {
            if self.env_fallback {
                std::env::var(key).ok().map(SecretValue::new)
            } else {
                None
            }
        })
    }

    pub fn contains(&self, key: &str) -> bool {
        self.get(key).is_some()
    }

    pub fn keys(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DiagnosticCode {
    Cycle,
    SchemaMismatch,
    MissingInput,
    MissingSecret,
    UnreachableOutput,
}

impl DiagnosticCode {
    pub fn severity(self) -> Severity {
        match self {
            DiagnosticCode::UnreachableOutput => Severity::Warning,
            _ => Severity::Error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub code: DiagnosticCode,
    pub severity: Severity,
    pub node: String,
    pub port: Option<String>,
    pub detail: String,
    pub involved: Vec<String>,
}

impl Diagnostic {
    fn new(code: DiagnosticCode, node: &str, port: Option<&str>, detail: String, involved: Vec<String>) -> Self {
        Diagnostic {
            code,
            severity: code.severity(),
            node: node.to_string(),
            port: port.map(str::to_string),
            detail,
            involved,
        }
    }
}

fn sort_diagnostics(diags: &mut [Diagnostic]) {
    diags.sort_by(|a, b| {
        (&a.node, &a.port, a.code, &a.detail).cmp(&(&b.node, &b.port, b.code, &b.detail))
    });
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub pass: bool,
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter().filter(|d| d.severity == Severity::Error)
    }

    pub fn has(&self, code: DiagnosticCode) -> bool {
        self.diagnostics.iter().any(|d| d.code == code)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("reports serialize")
    }
}

/// Strongly connected components via Tarjan's depth-first search.
fn strongly_connected(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut next = 0;
    let mut components = Vec::new();

    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        // explicit DFS frames: (node, next child position)
        let mut frames = vec![(root, 0usize)];
        index[root] = next;
        low[root] = next;
        next += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(&mut (v, ref mut child)) = frames.last_mut() {
            if let Some(&w) = adj[v].get(*child) {
                *child += 1;
                if index[w] == usize::MAX {
                    index[w] = next;
                    low[w] = next;
                    next += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    frames.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            frames.pop();
            if let Some(&(parent, _)) = frames.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut component = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w] = false;
                    component.push(w);
                    if w == v {
                        break;
                    }
                }
                component.sort_unstable();
                components.push(component);
            }
        }
    }
    components
}

/// One CYCLE diagnostic per strongly connected component containing a cycle.
pub fn detect_cycles(graph: &DagGraph) -> Vec<Diagnostic> {
    let adj = graph.successors();
    let mut diags: Vec<Diagnostic> = strongly_connected(&adj)
        .into_iter()
        .filter(|c| c.len() > 1 || adj[c[0]].contains(&c[0]))
        .map(|c| {
            let ids: Vec<String> = c.iter().map(|&i| graph.instances[i].node_id.clone()).collect();
            Diagnostic::new(
                DiagnosticCode::Cycle,
                &ids[0],
                None,
                format!("cycle among nodes {}", ids.join(", ")),
                ids.clone(),
            )
        })
        .collect();
    sort_diagnostics(&mut diags);
    diags
}

/// SCHEMA_MISMATCH for every edge (or literal) whose kind does not fit the
/// target port.
pub fn check_schema(graph: &DagGraph) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    for edge in &graph.edges {
        let involved = vec![edge.from.to_string(), edge.to.to_string()];
        let source = graph.instance(&edge.from.node).and_then(|i| i.spec.output(&edge.from.port));
        let target = graph.instance(&edge.to.node).and_then(|i| i.spec.input(&edge.to.port));
        let detail = match (source, target) {
            (Some(s), Some(t)) if check_assignable(s.kind, t.kind) => continue,
            (Some(s), Some(t)) => format!(
                "{} produces {} but {} expects {}",
                edge.from, s.kind, edge.to, t.kind
            ),
            (None, _) => format!("{} is not a declared output port", edge.from),
            (_, None) => format!("{} is not a declared input port", edge.to),
        };
        diags.push(Diagnostic::new(DiagnosticCode::SchemaMismatch, &edge.to.node, Some(&edge.to.port), detail, involved));
    }
    for inst in &graph.instances {
        for (port, value) in &inst.literals {
            let violation = match inst.spec.input(port) {
                Some(schema) => match validate_value(value, schema) {
                    Ok(()) => continue,
                    Err(v) => v.to_string(),
                },
                None => "not a declared input port".to_string(),
            };
            diags.push(Diagnostic::new(
                DiagnosticCode::SchemaMismatch,
                &inst.node_id,
                Some(port),
                format!("literal bound to {}.{port}: {violation}", inst.node_id),
                vec![format!("{}.{port}", inst.node_id)],
            ));
        }
    }
    sort_diagnostics(&mut diags);
    diags
}

/// Unbound required inputs, absent secrets, and dangling non-terminal outputs.
pub fn check_completeness(graph: &DagGraph, vault: &SecretVault) -> Vec<Diagnostic> {
    let bound: BTreeSet<(&str, &str)> = graph.edges.iter().map(|e| (e.to.node.as_str(), e.to.port.as_str())).collect();
    let feeding: BTreeSet<&str> = graph.edges.iter().map(|e| e.from.node.as_str()).collect();
    let mut diags = Vec::new();
    for inst in &graph.instances {
        for port in inst.spec.inputs.iter().filter(|p| p.required) {
            if !bound.contains(&(inst.node_id.as_str(), port.key.as_str())) && !inst.literals.contains_key(&port.key) {
                diags.push(Diagnostic::new(
                    DiagnosticCode::MissingInput,
                    &inst.node_id,
                    Some(&port.key),
                    format!("required input {}.{} has no binding", inst.node_id, port.key),
                    vec![],
                ));
            }
        }
        let secrets: BTreeSet<&str> = inst.spec.required_secrets.iter().map(String::as_str).collect();
        for key in secrets {
            if !vault.contains(key) {
                diags.push(Diagnostic::new(
                    DiagnosticCode::MissingSecret,
                    &inst.node_id,
                    None,
                    format!("secret {key:?} is not present in the vault"),
                    vec![key.to_string()],
                ));
            }
        }
        if !inst.spec.terminal && !feeding.contains(inst.node_id.as_str()) {
            diags.push(Diagnostic::new(
                DiagnosticCode::UnreachableOutput,
                &inst.node_id,
                None,
                format!("outputs of {} feed nothing and the node is not terminal", inst.node_id),
                vec![],
            ));
        }
    }
    sort_diagnostics(&mut diags);
    diags
}

/// Runs every check; passes iff no error-severity diagnostic was found.
pub fn validate(graph: &DagGraph, vault: &SecretVault) -> ValidationReport {
    let mut diagnostics = detect_cycles(graph);
    diagnostics.extend(check_schema(graph));
    diagnostics.extend(check_completeness(graph, vault));
    let pass = diagnostics.iter().all(|d| d.severity != Severity::Error);
    ValidationReport { pass, diagnostics }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{compile, PlanDocument, PlanNode};
    use crate::fixtures::{graph_from_edges, test_registry};
    use crate::protocol::Value;
    use serde_json::json;

    fn cycle_sets(graph: &DagGraph) -> Vec<Vec<String>> {
        detect_cycles(graph).into_iter().map(|d| d.involved).collect()
    }

    #[test]
    fn minimal_cycle() {
        let g = graph_from_edges(&["A", "B"], &[("A", "B"), ("B", "A")]);
        assert_eq!(cycle_sets(&g), vec![vec!["A".to_string(), "B".to_string()]]);
        let d = &detect_cycles(&g)[0];
        assert_eq!(d.code, DiagnosticCode::Cycle);
        assert_eq!(d.severity, Severity::Error);
        assert_eq!(d.node, "A");
    }

    #[test]
    fn diamond_is_acyclic() {
        let g = graph_from_edges(&["A", "B", "C", "D"], &[("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")]);
        assert!(detect_cycles(&g).is_empty());
    }

    #[test]
    fn self_loop() {
        let g = graph_from_edges(&["A"], &[("A", "A")]);
        assert_eq!(cycle_sets(&g), vec![vec!["A".to_string()]]);
    }

    #[test]
    fn one_diagnostic_per_component() {
        let g = graph_from_edges(
            &["A", "B", "C", "D", "E"],
            &[("A", "B"), ("B", "C"), ("C", "A"), ("B", "A"), ("D", "E"), ("E", "D")],
        );
        assert_eq!(
            cycle_sets(&g),
            vec![
                vec!["A".to_string(), "B".to_string(), "C".to_string()],
                vec!["D".to_string(), "E".to_string()]
            ]
        );
    }

    fn chart_after(kind: &str) -> DagGraph {
        let doc = PlanDocument::new(
            "p",
            vec![
                PlanNode::new("read", "datasource.read").literal("source", Value::text("sales_db")),
                PlanNode::new("t", "table.transform").config("output_kind", json!(kind)).link("data", "read", "rows"),
                PlanNode::new("c", "chart.spec")
                    .config("x", json!("region"))
                    .config("y", json!("amt"))
                    .link("data", "t", "rows"),
                PlanNode::new("r", "report.render").link("chart", "c", "chart"),
            ],
        );
        compile(&doc, &test_registry()).unwrap()
    }

    #[test]
    fn schema_check_flags_only_incompatible_edges() {
        assert!(check_schema(&chart_after("table")).is_empty());
        let diags = check_schema(&chart_after("text"));
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].code, DiagnosticCode::SchemaMismatch);
        assert_eq!(diags[0].node, "c");
        assert_eq!(diags[0].port.as_deref(), Some("data"));
        assert!(diags[0].detail.contains("text") && diags[0].detail.contains("table"));
        assert_eq!(diags[0].involved, vec!["t.rows", "c.data"]);
    }

    #[test]
    fn literal_of_wrong_kind_is_a_mismatch() {
        let doc = PlanDocument::new(
            "p",
            vec![PlanNode::new("k", "knowledge.search").literal("query", Value::Integer(3))],
        );
        let g = compile(&doc, &test_registry()).unwrap();
        let diags = check_schema(&g);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].port.as_deref(), Some("query"));
    }

    #[test]
    fn completeness() {
        let doc = PlanDocument::new(
            "p",
            vec![
                PlanNode::new("c", "chart.spec").config("x", json!("a")).config("y", json!("b")),
                PlanNode::new("db", "test.secure_read"),
            ],
        );
        let g = compile(&doc, &test_registry()).unwrap();
        let diags: Vec<_> = check_completeness(&g, &SecretVault::new())
            .into_iter()
            .filter(|d| d.severity == Severity::Error)
            .collect();
        assert_eq!(diags.len(), 2);
        assert_eq!((diags[0].code, diags[0].node.as_str(), diags[0].port.as_deref()), (DiagnosticCode::MissingInput, "c", Some("data")));
        assert_eq!(diags[1].code, DiagnosticCode::MissingSecret);
        assert_eq!(diags[1].involved, vec!["db_password"]);
        assert!(!format!("{diags:?}").contains("hunter2"));

        let mut vault = SecretVault::new();
        vault.insert("db_password", "hunter2");
        let report = validate(&g, &vault);
        assert!(report.diagnostics.iter().all(|d| d.code != DiagnosticCode::MissingSecret));
        assert!(!report.to_json().contains("hunter2"));
    }

    #[test]
    fn report_all_and_ordering() {
        // a cycle and a mismatch in one graph
        let mut g = chart_after("text");
        g.edges.push(crate::compiler::Edge {
            from: crate::compiler::PortRef::new("r", "report"),
            to: crate::compiler::PortRef::new("read", "source"),
        });
        let g = DagGraph::new(&g.graph_id, g.instances, g.edges);
        let report = validate(&g, &SecretVault::new());
        assert!(!report.pass);
        assert!(report.has(DiagnosticCode::Cycle));
        assert!(report.has(DiagnosticCode::SchemaMismatch));
        assert_eq!(report.diagnostics[0].code, DiagnosticCode::Cycle);
        assert_eq!(report.to_json(), validate(&g, &SecretVault::new()).to_json());
    }

    #[test]
    fn warnings_do_not_fail() {
        let doc = PlanDocument::new("p", vec![PlanNode::new("s", "util.sleep")]);
        let g = compile(&doc, &test_registry()).unwrap();
        let report = validate(&g, &SecretVault::new());
        assert!(report.pass);
        assert_eq!(report.diagnostics[0].code, DiagnosticCode::UnreachableOutput);
        assert_eq!(report.diagnostics[0].severity, Severity::Warning);
    }

    #[test]
    fn vault_file_and_debug_redaction() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("secrets");
        std::fs::write(&path, "# creds\ndb_password = s3cret\n\nother=x\n").unwrap();
        let mut vault = SecretVault::new();
        vault.load_file(&path).unwrap();
        assert_eq!(vault.get("db_password").unwrap().expose(), "s3cret");
        assert!(!vault.contains("DB_PASSWORD"));
        assert!(!format!("{vault:?}").contains("s3cret"));
    }
}
