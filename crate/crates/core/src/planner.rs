//! Request → plan translation: `@` binding resolution, SOP retrieval and
//! reuse, resolver-backed synthesis, bounded re-planning from feedback
//! traces, and experience archiving.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::catalog::{ColumnSummary, SourceCatalog, SourceKind};
use crate::compiler::{compile, Binding, CompileError, PlanDocument, PlanNode};
use crate::executor::{FeedbackTrace, RunState, RunStatus};
use crate::memory::{tokenize, KnowledgeBase, MemoryEntry, Provenance, SopHit, SopTemplate, WorkingMemory};
use crate::protocol::{truncate_chars, NodeRegistry, Value, ValueKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisRequest {
    pub session_id: String,
    pub text: String,
    pub bindings: Vec<String>,
    pub turn_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "error", rename_all = "snake_case")]
pub enum BindingError {
    #[error("unknown binding @{name}")]
    UnknownBinding { name: String },
    #[error("ambiguous binding @{name}: matches {candidates:?}")]
    AmbiguousBinding { name: String, candidates: Vec<String> },
}

/// Resolves `@name` mentions (exact name, else unique prefix) and strips
/// them from the text. A mention starts at the beginning of the text or
/// after whitespace.
pub fn parse_context_bindings(
    session_id: &str,
    raw: &str,
    catalog: &SourceCatalog,
    turn_index: u32,
) -> Result<AnalysisRequest, BindingError> {
    let names = catalog.names();
    let mut bindings: Vec<String> = Vec::new();
    let mut words = Vec::new();
    for word in raw.split_whitespace() {
        let Some(rest) = word.strip_prefix('@') else {
            words.push(word.to_string());
            continue;
        };
        let end = rest.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).unwrap_or(rest.len());
        let (mention, tail) = rest.split_at(end);
        if mention.is_empty() {
            words.push(word.to_string());
            continue;
        }
        let resolved = if names.iter().any(|n| n == mention) {
            mention.to_string()
        } else {
            let candidates: Vec<String> = names.iter().filter(|n| n.starts_with(mention)).cloned().collect();
            match candidates.len() {
                0 => return Err(BindingError::UnknownBinding { name: mention.to_string() }),
                1 => candidates[0].clone(),
                _ => return Err(BindingError::AmbiguousBinding { name: mention.to_string(), candidates }),
            }
        };
        if !bindings.contains(&resolved) {
            bindings.push(resolved);
        }
        // keep trailing punctuation only if it carries words
        if tail.chars().any(|c| c.is_alphanumeric()) {
            words.push(tail.to_string());
        }
    }
    let joined = words.join(" ");
    let text = joined
        .replace(" ,", ",")
        .trim_matches(|c: char| c.is_whitespace() || c == ',')
        .to_string();
    Ok(AnalysisRequest { session_id: session_id.to_string(), text, bindings, turn_index })
}

/// What a resolver sees about a bound source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingInfo {
    pub name: String,
    pub kind: SourceKind,
    #[serde(default)]
    pub columns: Vec<ColumnSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDoc {
    pub doc_id: String,
    pub score: f64,
    pub text: String,
}

/// Resolver wire request. The run-derived input is the feedback trace only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolveRequest {
    pub request_text: String,
    pub bindings: Vec<BindingInfo>,
    pub retrieved_docs: Vec<RetrievedDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous_plan: Option<PlanDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackTrace>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct ResolverError(pub String);

/// Intent-resolution backend: turns a request (and optionally a failed plan
/// plus its trace) into a plan document.
pub trait IntentResolver: Send + Sync {
    fn resolve(&self, request: &ResolveRequest) -> Result<PlanDocument, ResolverError>;
}

fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(ca != *cb)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Replaces column references to `bad` (and derived `<op>_bad` aliases) in
/// every config string of the plan.
fn rename_column(plan: &mut PlanDocument, bad: &str, good: &str) {
    fn walk(v: &mut Json, bad: &str, good: &str) {
        match v {
            Json::String(s) => {
                if s == bad {
                    *s = good.to_string();
                } else if let Some(prefix) = s.strip_suffix(bad).filter(|p| p.ends_with('_')) {
                    *s = format!("{prefix}{good}");
                }
            }
            Json::Array(items) => items.iter_mut().for_each(|i| walk(i, bad, good)),
            Json::Object(map) => map.values_mut().for_each(|i| walk(i, bad, good)),
            _ => {}
        }
    }
    for node in &mut plan.nodes {
        for value in node.config.values_mut() {
            walk(value, bad, good);
        }
    }
}

fn quoted(message: &str) -> Option<&str> {
    let start = message.find('"')? + 1;
    let len = message[start..].find('"')?;
    Some(&message[start..start + len])
}

/// Keyword and binding heuristics over the built-in node library.
#[derive(Debug, Clone, Default)]
pub struct RuleResolver;

impl RuleResolver {
    fn synthesize(&self, req: &ResolveRequest) -> Result<PlanDocument, ResolverError> {
        let csv = req.bindings.iter().find(|b| b.kind == SourceKind::Csv);
        let collection = req.bindings.iter().find(|b| b.kind == SourceKind::KnowledgeCollection);
        if csv.is_none() && collection.is_none() {
            return Err(ResolverError("request binds no data source or knowledge collection".into()));
        }
        let mentioned: BTreeSet<String> = tokenize(&req.request_text).collect();
        let mut nodes = Vec::new();
        let mut report = PlanNode::new("report", "report.render").config("title", json!(req.request_text));

        if let Some(src) = csv {
            if src.columns.is_empty() {
                return Err(ResolverError(format!("no column information for source {}", src.name)));
            }
            let pick = |kind: ValueKind| {
                let of_kind: Vec<&ColumnSummary> = src.columns.iter().filter(|c| c.kind == kind).collect();
                of_kind
                    .iter()
                    .find(|c| mentioned.contains(&c.name.to_lowercase()))
                    .or(of_kind.first())
                    .map(|c| c.name.clone())
            };
            nodes.push(PlanNode::new("read_source", "datasource.read").literal("source", Value::text(&src.name)));
            let transform = PlanNode::new("transform", "table.transform");
            match (pick(ValueKind::Text), pick(ValueKind::Number)) {
                (Some(group), Some(measure)) => {
                    let total = format!("sum_{measure}");
                    nodes.push(
                        transform
                            .config("group_by", json!([group]))
                            .config("aggregations", json!([{"op": "sum", "column": measure}]))
                            .config("sort", json!({"column": total, "descending": true}))
                            .link("data", "read_source", "rows"),
                    );
                    nodes.push(
                        PlanNode::new("chart", "chart.spec")
                            .config("chart_type", json!("bar"))
                            .config("x", json!(group))
                            .config("y", json!(total))
                            .config("title", json!(req.request_text))
                            .link("data", "transform", "rows"),
                    );
                    report = report.link("chart", "chart", "chart");
                }
                _ => nodes.push(transform.config("limit", json!(20)).link("data", "read_source", "rows")),
            }
            report = report.link("table", "transform", "rows");
        }
        if let Some(coll) = collection {
            nodes.push(
                PlanNode::new("search_knowledge", "knowledge.search")
                    .config("collection", json!(coll.name))
                    .config("k", json!(3))
                    .literal("query", Value::text(&req.request_text)),
            );
            report = report.link("context", "search_knowledge", "snippets");
        }
        nodes.push(report);
        Ok(PlanDocument::new("synthesized", nodes))
    }

    fn correct(&self, previous: &PlanDocument, trace: &FeedbackTrace, req: &ResolveRequest) -> Result<PlanDocument, ResolverError> {
        let columns: Vec<&ColumnSummary> = req.bindings.iter().flat_map(|b| b.columns.iter()).collect();
        let mut revised = previous.clone();
        let message = &trace.error_message;
        if message.starts_with("unknown column") {
            let bad = quoted(message).ok_or_else(|| ResolverError(format!("cannot parse {message:?}")))?;
            let good = columns
                .iter()
                .map(|c| (levenshtein(bad, &c.name), c.name.as_str()))
                .filter(|(d, _)| *d <= 3)
                .min()
                .map(|(_, name)| name)
                .ok_or_else(|| ResolverError(format!("no column resembles {bad:?}")))?;
            rename_column(&mut revised, bad, good);
        } else if message.starts_with("type error") {
            let bad = quoted(message).ok_or_else(|| ResolverError(format!("cannot parse {message:?}")))?;
            let good = columns
                .iter()
                .find(|c| c.kind == ValueKind::Number && c.name != bad)
                .ok_or_else(|| ResolverError("no numeric column available".into()))?;
            rename_column(&mut revised, bad, &good.name);
        } else {
            return Err(ResolverError(format!("no correction rule for: {message}")));
        }
        Ok(revised)
    }
}

impl IntentResolver for RuleResolver {
    fn resolve(&self, request: &ResolveRequest) -> Result<PlanDocument, ResolverError> {
        match (&request.previous_plan, &request.feedback) {
            (Some(prev), Some(trace)) => self.correct(prev, trace, request),
            _ => self.synthesize(request),
        }
    }
}

/// Replays canned plans in order and records every request it receives.
#[derive(Default)]
pub struct ScriptedResolver {
    plans: Mutex<std::collections::VecDeque<PlanDocument>>,
    seen: Mutex<Vec<ResolveRequest>>,
}

impl ScriptedResolver {
    pub fn new(plans: impl IntoIterator<Item = PlanDocument>) -> Self {
        ScriptedResolver { plans: Mutex::new(plans.into_iter().collect()), seen: Mutex::default() }
    }

    pub fn requests(&self) -> Vec<ResolveRequest> {
        self.seen.lock().clone()
    }
}

impl IntentResolver for ScriptedResolver {
    fn resolve(&self, request: &ResolveRequest) -> Result<PlanDocument, ResolverError> {
        self.seen.lock().push(request.clone());
        self.plans.lock().pop_front().ok_or_else(|| ResolverError("script exhausted".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub reuse_threshold: f64,
    pub max_replans: u32,
    pub sop_k: usize,
    pub doc_k: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig { reuse_threshold: 0.6, max_replans: 2, sop_k: 3, doc_k: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("resolver failure: {0}")]
    ResolverFailure(String),
    #[error("template {sop_id} has no binding for slot {slot}")]
    SlotUnfillable { sop_id: String, slot: String },
    #[error("planned workflow does not compile: {0}")]
    InvalidPlan(CompileError),
    #[error("giving up after {} failed attempts", traces.len())]
    GiveUp { traces: Vec<FeedbackTrace> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "path", rename_all = "snake_case")]
pub enum PlanPath {
    Template { sop_id: String },
    Synthesized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub plan: PlanDocument,
    pub path: PlanPath,
    pub sops: Vec<SopHit>,
    pub docs: Vec<RetrievedDoc>,
}

/// Content-derived plan id.
pub fn plan_id_for(doc: &PlanDocument) -> String {
    use sha2::{Digest, Sha256};
    let nodes = serde_json::to_string(&doc.nodes).expect("plans serialize");
    format!("plan-{}", &hex::encode(Sha256::digest(nodes.as_bytes()))[..12])
}

const SOURCE_SLOT: &str = "{{source:";
const REQUEST_SLOT: &str = "{{param:request}}";

/// Replaces bound source names and the request text with slots. Node ids
/// are kept as is.
pub fn generalize(plan: &PlanDocument, bindings: &[(String, SourceKind)], request_text: &str) -> (PlanDocument, Vec<SourceKind>, Vec<String>) {
    let mut used = BTreeMap::new();
    let mut uses_request = false;
    let mut subst = |s: &str| -> Option<String> {
        if let Some(i) = bindings.iter().position(|(name, _)| name == s) {
            used.insert(i, bindings[i].1);
            return Some(format!("{SOURCE_SLOT}{i}}}}}"));
        }
        if !request_text.is_empty() && s == request_text {
            uses_request = true;
            return Some(REQUEST_SLOT.to_string());
        }
        None
    };
    let mut out = plan.clone();
    out.metadata.clear();
    for node in &mut out.nodes {
        for value in node.config.values_mut() {
            map_strings(value, &mut subst);
        }
        for binding in node.inputs.values_mut() {
            if let Binding::Literal(Value::Text(s)) = binding {
                if let Some(r) = subst(s) {
                    *s = r;
                }
            }
        }
    }
    // slots renumbered densely in binding order
    let order: Vec<usize> = used.keys().copied().collect();
    let renumber: BTreeMap<String, String> = order
        .iter()
        .enumerate()
        .map(|(new, old)| (format!("{SOURCE_SLOT}{old}}}}}"), format!("{SOURCE_SLOT}{new}}}}}")))
        .collect();
    let mut renum = |s: &str| renumber.get(s).cloned();
    for node in &mut out.nodes {
        for value in node.config.values_mut() {
            map_strings(value, &mut renum);
        }
        for binding in node.inputs.values_mut() {
            if let Binding::Literal(Value::Text(s)) = binding {
                if let Some(r) = renum(s) {
                    *s = r;
                }
            }
        }
    }
    let slots = used.values().copied().collect();
    let params = if uses_request { vec!["request".to_string()] } else { vec![] };
    (out, slots, params)
}

fn map_strings(v: &mut Json, f: &mut impl FnMut(&str) -> Option<String>) {
    match v {
        Json::String(s) => {
            if let Some(r) = f(s) {
                *s = r;
            }
        }
        Json::Array(items) => items.iter_mut().for_each(|i| map_strings(i, f)),
        Json::Object(map) => map.values_mut().for_each(|i| map_strings(i, f)),
        _ => {}
    }
}

/// Fills a template's slots: each source slot takes the next unused binding
/// of the matching kind.
pub fn instantiate(sop: &SopTemplate, bindings: &[(String, SourceKind)], request_text: &str) -> Result<PlanDocument, PlanError> {
    let mut taken = vec![false; bindings.len()];
    let mut fills = BTreeMap::new();
    for (slot, kind) in sop.source_slots.iter().enumerate() {
        let idx = (0..bindings.len())
            .find(|&i| !taken[i] && bindings[i].1 == *kind)
            .ok_or_else(|| PlanError::SlotUnfillable { sop_id: sop.sop_id.clone(), slot: format!("source:{slot}") })?;
        taken[idx] = true;
        fills.insert(format!("{SOURCE_SLOT}{slot}}}}}"), bindings[idx].0.clone());
    }
    fills.insert(REQUEST_SLOT.to_string(), request_text.to_string());
    let mut fill = |s: &str| fills.get(s).cloned();
    let mut plan = sop.plan.clone();
    for node in &mut plan.nodes {
        for value in node.config.values_mut() {
            map_strings(value, &mut fill);
        }
        for binding in node.inputs.values_mut() {
            if let Binding::Literal(Value::Text(s)) = binding {
                if let Some(r) = fill(s) {
                    *s = r;
                }
            }
        }
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchiveOutcome {
    Archived { sop_id: String, new: bool },
    Skipped,
}

/// Planner over a shared catalog, knowledge base and registry.
#[derive(Clone)]
pub struct Planner {
    pub catalog: Arc<SourceCatalog>,
    pub kb: crate::memory::SharedKnowledgeBase,
    pub registry: Arc<NodeRegistry>,
    pub resolver: Arc<dyn IntentResolver>,
    pub config: PlannerConfig,
}

impl Planner {
    fn binding_infos(&self, request: &AnalysisRequest) -> Vec<BindingInfo> {
        request
            .bindings
            .iter()
            .filter_map(|name| self.catalog.get(name))
            .map(|r| BindingInfo { name: r.name, kind: r.kind, columns: r.columns })
            .collect()
    }

    fn binding_kinds(&self, request: &AnalysisRequest) -> Vec<(String, SourceKind)> {
        self.binding_infos(request).into_iter().map(|b| (b.name, b.kind)).collect()
    }

    fn retrieve_docs(&self, kb: &KnowledgeBase, text: &str) -> Vec<RetrievedDoc> {
        kb.search_knowledge(text, self.config.doc_k, None)
            .into_iter()
            .map(|h| RetrievedDoc {
                text: kb.document(&h.doc_id).map(|d| truncate_chars(&d.text, 512)).unwrap_or_default(),
                doc_id: h.doc_id,
                score: h.score,
            })
            .collect()
    }

    fn finish(&self, mut plan: PlanDocument, request: &AnalysisRequest, path: &PlanPath, sops: &[SopHit], docs: &[RetrievedDoc]) -> Result<PlanDocument, PlanError> {
        plan.metadata.clear();
        plan.plan_id = plan_id_for(&plan);
        let mut meta = serde_json::to_value(path).expect("paths serialize");
        let meta = meta.as_object_mut().expect("path is an object");
        meta.insert("request".into(), json!(request.text));
        meta.insert("bindings".into(), json!(request.bindings));
        meta.insert("retrieved_docs".into(), json!(docs.iter().map(|d| &d.doc_id).collect::<Vec<_>>()));
        meta.insert("retrieved_sops".into(), json!(sops));
        plan.metadata = meta.clone().into_iter().collect();
        compile(&plan, &self.registry).map_err(PlanError::InvalidPlan)?;
        Ok(plan)
    }

    /// Reuses the best SOP when it clears the threshold, else asks the resolver.
    pub fn plan(&self, request: &AnalysisRequest, memory: &mut WorkingMemory) -> Result<PlanOutcome, PlanError> {
        memory.push(MemoryEntry::Request {
            turn: request.turn_index,
            text: request.text.clone(),
            bindings: request.bindings.clone(),
        });
        let kb = self.kb.read();
        let sops = kb.search_sops(&request.text, self.config.sop_k);
        let docs = self.retrieve_docs(&kb, &request.text);
        let outcome = match sops.first() {
            Some(best) if best.score >= self.config.reuse_threshold => {
                let sop = kb.sop(&best.sop_id).expect("hit references stored sop");
                let plan = instantiate(sop, &self.binding_kinds(request), &request.text)?;
                let path = PlanPath::Template { sop_id: sop.sop_id.clone() };
                PlanOutcome { plan: self.finish(plan, request, &path, &sops, &docs)?, path, sops, docs }
            }
            _ => {
                let req = ResolveRequest {
                    request_text: request.text.clone(),
                    bindings: self.binding_infos(request),
                    retrieved_docs: docs.clone(),
                    previous_plan: None,
                    feedback: None,
                };
                let plan = self.resolver.resolve(&req).map_err(|e| PlanError::ResolverFailure(e.0))?;
                let path = PlanPath::Synthesized;
                PlanOutcome { plan: self.finish(plan, request, &path, &sops, &docs)?, path, sops, docs }
            }
        };
        memory.push(MemoryEntry::Plan {
            plan_id: outcome.plan.plan_id.clone(),
            path: match &outcome.path {
                PlanPath::Template { sop_id } => format!("template:{sop_id}"),
                PlanPath::Synthesized => "synthesized".into(),
            },
            nodes: outcome.plan.nodes.len(),
        });
        Ok(outcome)
    }

    /// Revises `previous` after a failure. `attempt` counts replans from 1;
    /// bindings stay fixed.
    pub fn replan(
        &self,
        request: &AnalysisRequest,
        previous: &PlanDocument,
        feedback: &FeedbackTrace,
        memory: &mut WorkingMemory,
        attempt: u32,
    ) -> Result<PlanDocument, PlanError> {
        memory.push(MemoryEntry::Feedback { trace: feedback.clone() });
        if attempt > self.config.max_replans {
            return Err(PlanError::GiveUp { traces: memory.feedback().into_iter().cloned().collect() });
        }
        let docs = self.retrieve_docs(&self.kb.read(), &request.text);
        let req = ResolveRequest {
            request_text: request.text.clone(),
            bindings: self.binding_infos(request),
            retrieved_docs: docs.clone(),
            previous_plan: Some(previous.clone()),
            feedback: Some(feedback.clone()),
        };
        let revised = self.resolver.resolve(&req).map_err(|e| PlanError::ResolverFailure(e.0))?;
        if revised.same_structure(previous) {
            return Err(PlanError::ResolverFailure("no-op revision".into()));
        }
        let mut plan = revised;
        let metadata = previous.metadata.clone();
        plan.plan_id = plan_id_for(&plan);
        plan.metadata = metadata;
        plan.metadata.insert("replan_attempt".into(), json!(attempt));
        compile(&plan, &self.registry).map_err(PlanError::InvalidPlan)?;
        memory.push(MemoryEntry::Plan { plan_id: plan.plan_id.clone(), path: format!("replan:{attempt}"), nodes: plan.nodes.len() });
        Ok(plan)
    }

    fn store_sop(&self, plan: &PlanDocument, description: &str, provenance: Provenance) -> ArchiveOutcome {
        let bindings: Vec<(String, SourceKind)> = plan
            .metadata
            .get("bindings")
            .and_then(|b| serde_json::from_value::<Vec<String>>(b.clone()).ok())
            .unwrap_or_default()
            .into_iter()
            .filter_map(|name| self.catalog.get(&name).map(|r| (r.name, r.kind)))
            .collect();
        let request_text = plan.metadata.get("request").and_then(Json::as_str).unwrap_or("");
        let (template, source_slots, parameter_slots) = generalize(plan, &bindings, request_text);
        let (sop_id, new) = self.kb.write().upsert_sop(SopTemplate {
            sop_id: String::new(),
            description: description.to_string(),
            plan: PlanDocument { plan_id: "template".into(), ..template },
            source_slots,
            parameter_slots,
            provenance,
            success_count: 1,
        });
        ArchiveOutcome::Archived { sop_id, new }
    }

    /// Auto-archives a plan whose run succeeded; failures are skipped.
    pub fn archive_workflow(&self, plan: &PlanDocument, outcome: &RunState) -> ArchiveOutcome {
        if outcome.status != RunStatus::Succeeded {
            return ArchiveOutcome::Skipped;
        }
        let description = plan.metadata.get("request").and_then(Json::as_str).unwrap_or(&plan.plan_id).to_string();
        self.store_sop(plan, &description, Provenance::AutoArchived)
    }

    /// Manual save; any plan is accepted.
    pub fn save_sop(&self, plan: &PlanDocument, description: &str) -> ArchiveOutcome {
        self.store_sop(plan, description, Provenance::Manual)
    }
}
