//! Wiring of catalog, knowledge base, registry, planner and executor into
//! one object, plus the self-correcting plan → run → re-plan loop.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::catalog::{CatalogError, SourceCatalog, SourceKind, SourceRegistration};
use crate::compiler::{compile, CompileError, DagGraph, PlanDocument};
use crate::executor::{open_run_log, EventKind, EventLog, Executor, ObjectStore, RunConfig, RunRegistry, RunState, RunStatus};
use crate::memory::{KnowledgeBase, SharedKnowledgeBase, WorkingMemory};
use crate::nodes::{builtin_nodes, parse_csv, BuiltinEnv, CompletionBackend, NodeError};
use crate::optimizer::{compute_layers, sequentialize, ExecutionMode, LayerPlan};
use crate::planner::{
    AnalysisRequest, ArchiveOutcome, IntentResolver, PlanError, PlanOutcome, PlanPath, Planner, PlannerConfig,
};
use crate::protocol::{NodeImpl, NodeRegistry, NodeSpec, RegistryError};
use crate::validator::{validate, SecretVault, ValidationReport};

pub const SOURCES_MANIFEST: &str = "sources.json";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("cannot read source: {0}")]
    Source(NodeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Default)]
pub struct EngineOptions {
    /// Root for `runs/<run_id>/...`; in-memory when unset.
    pub runs_dir: Option<PathBuf>,
    /// Knowledge base directory (also holds the sources manifest).
    pub kb_dir: Option<PathBuf>,
    pub planner: PlannerConfig,
    pub run: RunConfig,
    pub agent_backend: Option<Arc<dyn CompletionBackend>>,
    /// Extra node types registered next to the built-ins.
    pub extra_nodes: Vec<(NodeSpec, NodeImpl)>,
}

/// Compile + validate + layer results for one plan revision.
#[derive(Debug, Clone, Serialize)]
pub struct Analysis {
    pub graph: DagGraph,
    pub report: ValidationReport,
    /// Absent when the graph has a cycle.
    pub layers: Option<LayerPlan>,
}

impl Analysis {
    pub fn runnable(&self) -> bool {
        self.report.pass && self.layers.is_some()
    }

    pub fn layers_for(&self, mode: ExecutionMode) -> Option<LayerPlan> {
        self.layers.as_ref().map(|l| match mode {
            ExecutionMode::Parallel => l.clone(),
            ExecutionMode::Sequential => sequentialize(l),
        })
    }
}

/// Result of a plan → run (→ re-plan → run)* loop.
#[derive(Debug, Clone)]
pub struct Episode {
    pub run_id: String,
    pub plans: Vec<PlanDocument>,
    pub runs: Vec<RunState>,
    pub replans: u32,
    pub archived: Option<ArchiveOutcome>,
    pub error: Option<PlanError>,
}

impl Episode {
    pub fn status(&self) -> RunStatus {
        self.runs.last().map(|r| r.status).unwrap_or(RunStatus::Pending)
    }

    pub fn final_plan(&self) -> &PlanDocument {
        self.plans.last().expect("episodes start with a plan")
    }
}

pub struct Engine {
    pub catalog: Arc<SourceCatalog>,
    pub kb: SharedKnowledgeBase,
    pub registry: Arc<NodeRegistry>,
    pub executor: Executor,
    pub planner: Planner,
    pub vault: SecretVault,
    pub runs: RunRegistry,
    runs_dir: Option<PathBuf>,
    kb_dir: Option<PathBuf>,
    run_config: RunConfig,
}

impl Engine {
    pub fn new(options: EngineOptions, resolver: Arc<dyn IntentResolver>, vault: SecretVault) -> Result<Self, EngineError> {
        let (catalog, kb) = match &options.kb_dir {
            Some(dir) => {
                let manifest = dir.join(SOURCES_MANIFEST);
                let catalog =
                    if manifest.exists() { SourceCatalog::load_manifest(&manifest)? } else { SourceCatalog::new() };
                (catalog, KnowledgeBase::load(dir)?)
            }
            None => (SourceCatalog::new(), KnowledgeBase::new()),
        };
        let catalog = Arc::new(catalog);
        let kb = kb.into_shared();
        let mut env = BuiltinEnv::new(catalog.clone(), kb.clone());
        if let Some(backend) = options.agent_backend {
            env = env.with_agent_backend(backend);
        }
        let mut registry = NodeRegistry::new();
        for (spec, imp) in builtin_nodes(&env).into_iter().chain(options.extra_nodes) {
            registry.register(spec, imp)?;
        }
        let registry = Arc::new(registry);
        let store = Arc::new(match &options.runs_dir {
            Some(dir) => ObjectStore::persistent(dir),
            None => ObjectStore::in_memory(),
        });
        Ok(Engine {
            planner: Planner {
                catalog: catalog.clone(),
                kb: kb.clone(),
                registry: registry.clone(),
                resolver,
                config: options.planner,
            },
            executor: Executor::new(registry.clone(), store),
            catalog,
            kb,
            registry,
            vault,
            runs: RunRegistry::new(),
            runs_dir: options.runs_dir,
            kb_dir: options.kb_dir,
            run_config: options.run,
        })
    }

    pub fn runs_dir(&self) -> Option<&Path> {
        self.runs_dir.as_deref()
    }

    pub fn run_config(&self) -> RunConfig {
        self.run_config
    }

    /// Writes the knowledge base and sources manifest, if backed by a directory.
    pub fn persist(&self) -> Result<(), EngineError> {
        if let Some(dir) = &self.kb_dir {
            self.kb.read().save(dir)?;
            self.catalog.save_manifest(&dir.join(SOURCES_MANIFEST))?;
        }
        Ok(())
    }

    /// Registers a CSV file and stores its header and inferred column kinds
    /// as a schema document in the knowledge base.
    pub fn register_csv(&self, name: &str, path: &Path) -> Result<SourceRegistration, EngineError> {
        if self.catalog.contains(name) {
            return Err(CatalogError::DuplicateName(name.to_string()).into());
        }
        // absolute, so the manifest stays valid wherever it is reloaded from
        let path = std::fs::canonicalize(path)?;
        let bytes = std::fs::read(&path)?;
        let table = parse_csv(&bytes).map_err(EngineError::Source)?;
        let mut reg = SourceRegistration::csv(name, &path).with_columns_from(&table);
        let doc_id = self.kb.write().ingest_document(&format!("schema:{name}"), &reg.schema_summary(), vec!["schema".into()]);
        reg.schema_doc_id = Some(doc_id);
        self.catalog.register(reg.clone())?;
        self.persist()?;
        Ok(reg)
    }

    pub fn register_collection(&self, name: &str) -> Result<SourceRegistration, EngineError> {
        let reg = SourceRegistration::collection(name);
        self.catalog.register(reg.clone())?;
        self.persist()?;
        Ok(reg)
    }

    /// Embeds and stores a document; a collection with a bindable name is
    /// registered on first use.
    pub fn ingest_document(&self, collection: &str, text: &str, tags: Vec<String>) -> Result<String, EngineError> {
        let doc_id = self.kb.write().ingest_document(collection, text, tags);
        if crate::catalog::is_binding_name(collection) && !self.catalog.contains(collection) {
            self.catalog.register(SourceRegistration::collection(collection))?;
        }
        self.persist()?;
        Ok(doc_id)
    }

    pub fn analyze(&self, doc: &PlanDocument) -> Result<Analysis, CompileError> {
        let graph = compile(doc, &self.registry)?;
        let report = validate(&graph, &self.vault);
        let layers = compute_layers(&graph).ok();
        Ok(Analysis { graph, report, layers })
    }

    /// New event log for `run_id`, registered for streaming.
    pub fn open_log(&self, run_id: &str) -> Result<Arc<EventLog>, EngineError> {
        let log = Arc::new(open_run_log(self.runs_dir.as_deref(), run_id)?);
        self.runs.insert(run_id, log.clone());
        Ok(log)
    }

    /// One executor pass over an analyzed plan.
    pub fn execute(&self, run_id: &str, analysis: &Analysis, mode: ExecutionMode, config: &RunConfig, log: &EventLog) -> RunState {
        let layers = analysis.layers_for(mode).unwrap_or_else(|| LayerPlan {
            graph_id: analysis.graph.graph_id.clone(),
            layers: vec![],
            mode,
        });
        self.executor.execute(run_id, &analysis.graph, &layers, &self.vault, config, log)
    }

    pub fn parse_request(&self, session_id: &str, text: &str, turn: u32) -> Result<AnalysisRequest, crate::planner::BindingError> {
        crate::planner::parse_context_bindings(session_id, text, &self.catalog, turn)
    }

    /// Appends `plan_started` and `sops_retrieved` for a planning pass.
    pub fn log_planning(&self, log: &EventLog, request: &AnalysisRequest, outcome: &PlanOutcome) {
        log.append(
            EventKind::PlanStarted,
            json!({"session_id": request.session_id, "turn": request.turn_index, "request": request.text, "bindings": request.bindings}),
        );
        log.append(
            EventKind::SopsRetrieved,
            json!({
                "plan_id": outcome.plan.plan_id,
                "path": outcome.path,
                "sops": outcome.sops,
                "docs": outcome.docs.iter().map(|d| json!({"doc_id": d.doc_id, "score": d.score})).collect::<Vec<_>>(),
            }),
        );
    }

    /// Runs `plan`, re-planning from each failure's feedback trace until a
    /// run succeeds or the planner gives up. All attempts share `log`.
    pub fn run_with_correction(
        &self,
        run_id: &str,
        request: &AnalysisRequest,
        plan: PlanDocument,
        memory: &mut WorkingMemory,
        mode: ExecutionMode,
        log: &EventLog,
    ) -> Episode {
        let mut episode =
            Episode { run_id: run_id.to_string(), plans: vec![plan], runs: vec![], replans: 0, archived: None, error: None };
        loop {
            let plan = episode.final_plan().clone();
            let analysis = match self.analyze(&plan) {
                Ok(a) => a,
                Err(e) => {
                    episode.error = Some(PlanError::InvalidPlan(e));
                    break;
                }
            };
            let state = self.execute(run_id, &analysis, mode, &self.run_config, log);
            memory.push(crate::memory::MemoryEntry::Outcome { run_id: run_id.to_string(), status: state.status.as_str().into() });
            let status = state.status;
            let feedback = state.feedback.clone();
            episode.runs.push(state);
            match (status, feedback) {
                (RunStatus::Succeeded, _) => {
                    let outcome = self.planner.archive_workflow(&plan, episode.runs.last().expect("just pushed"));
                    if let Err(e) = self.persist() {
                        tracing::warn!("knowledge base not persisted: {e}");
                    }
                    episode.archived = Some(outcome);
                    break;
                }
                (RunStatus::Failed, Some(trace)) => {
                    let attempt = episode.replans + 1;
                    if attempt <= self.planner.config.max_replans {
                        log.append(
                            EventKind::ReplanTriggered,
                            json!({"attempt": attempt, "node_id": trace.node_id, "error": trace.error_message}),
                        );
                        log.append(
                            EventKind::PlanStarted,
                            json!({"session_id": request.session_id, "turn": request.turn_index, "replan": attempt}),
                        );
                    }
                    match self.planner.replan(request, &plan, &trace, memory, attempt) {
                        Ok(revised) => {
                            log.append(
                                EventKind::SopsRetrieved,
                                json!({"plan_id": revised.plan_id, "path": PlanPath::Synthesized, "sops": [], "replan": attempt}),
                            );
                            episode.replans = attempt;
                            episode.plans.push(revised);
                        }
                        Err(e) => {
                            episode.error = Some(e);
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        episode
    }

    /// Parse bindings, plan, then run with correction, all in one new log.
    pub fn solve(
        &self,
        run_id: &str,
        request: &AnalysisRequest,
        memory: &mut WorkingMemory,
        mode: ExecutionMode,
    ) -> Result<(PlanOutcome, Episode), PlanError> {
        let log = self.open_log(run_id).map_err(|e| PlanError::ResolverFailure(e.to_string()))?;
        let outcome = match self.planner.plan(request, memory) {
            Ok(o) => o,
            Err(e) => {
                log.close();
                return Err(e);
            }
        };
        self.log_planning(&log, request, &outcome);
        let episode = self.run_with_correction(run_id, request, outcome.plan.clone(), memory, mode, &log);
        log.close();
        Ok((outcome, episode))
    }

    pub fn source_kind(&self, name: &str) -> Option<SourceKind> {
        self.catalog.get(name).map(|r| r.kind)
    }
}

/// Time-ordered unique id: `<prefix>_<uuid v7 hex>`.
pub fn new_id(prefix: &str) -> String {
    format!("{prefix}_{}", uuid::Uuid::now_v7().simple())
}
