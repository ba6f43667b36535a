//! Planning, self-correction and workflow reuse through the engine.

use std::sync::Arc;

use flowgraph_core::fixtures::{demo_engine, demo_engine_with, demo_plan, DEMO_FOLLOWUP, DEMO_MESSAGE};
use flowgraph_core::memory::Provenance;
use flowgraph_core::nodes::{ScriptedBackend, SummarizeAgent};
use flowgraph_core::planner::ArchiveOutcome;
use flowgraph_core::{
    EngineOptions, EventKind, ExecutionMode, KnowledgeBase, NodeStatus, PlanError, PlanNode, PlanPath, RuleResolver,
    RunStatus, ScriptedResolver, ValueKind, WorkingMemory,
};
use serde_json::json;

fn kinds_of(engine: &flowgraph_core::Engine, run_id: &str) -> Vec<EventKind> {
    engine.runs.get(run_id).unwrap().snapshot(0).iter().map(|e| e.kind).collect()
}

fn count(kinds: &[EventKind], kind: EventKind) -> usize {
    kinds.iter().filter(|k| **k == kind).count()
}

#[test]
fn demo_runs_branches_in_parallel_and_reuses_the_archived_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let engine = demo_engine(dir.path(), Arc::new(RuleResolver));
    let mut memory = WorkingMemory::new();

    let request = engine.parse_request("ses_demo", DEMO_MESSAGE, 0).unwrap();
    assert_eq!(request.bindings, vec!["sales_db", "financial_metrics"]);
    let (outcome, episode) = engine.solve("run_demo_1", &request, &mut memory, ExecutionMode::Parallel).unwrap();
    assert_eq!(outcome.path, PlanPath::Synthesized);
    assert_eq!(episode.status(), RunStatus::Succeeded);
    assert_eq!(episode.replans, 0);

    let analysis = engine.analyze(episode.final_plan()).unwrap();
    let layers = analysis.layers.unwrap();
    assert_eq!(layers.layer_of("read_source"), layers.layer_of("search_knowledge"));

    let run = episode.runs.last().unwrap();
    let kinds: Vec<ValueKind> = run
        .artifacts()
        .iter()
        .map(|(_, _, id)| engine.executor.store().get(id).unwrap().value.kind())
        .collect();
    assert!(kinds.iter().filter(|k| **k == ValueKind::Table).count() >= 1);
    assert_eq!(kinds.iter().filter(|k| **k == ValueKind::ChartSpec).count(), 1);
    assert_eq!(kinds.iter().filter(|k| **k == ValueKind::Report).count(), 1);

    let Some(ArchiveOutcome::Archived { sop_id, new: true }) = episode.archived.clone() else {
        panic!("expected a fresh archive, got {:?}", episode.archived)
    };

    let followup = engine.parse_request("ses_demo", DEMO_FOLLOWUP, 1).unwrap();
    let (outcome, episode) = engine.solve("run_demo_2", &followup, &mut memory, ExecutionMode::Parallel).unwrap();
    assert_eq!(outcome.path, PlanPath::Template { sop_id: sop_id.clone() });
    assert_eq!(outcome.plan.metadata["sop_id"], json!(sop_id));
    assert_eq!(outcome.plan.metadata["path"], json!("template"));
    assert_eq!(episode.status(), RunStatus::Succeeded);
    assert_eq!(episode.archived, Some(ArchiveOutcome::Archived { sop_id: sop_id.clone(), new: false }));
    assert_eq!(engine.kb.read().sop(&sop_id).unwrap().success_count, 2);
    assert_eq!(count(&kinds_of(&engine, "run_demo_2"), EventKind::SopsRetrieved), 1);
}

#[test]
fn archived_workflows_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let sop_id = {
        let engine = demo_engine(dir.path(), Arc::new(RuleResolver));
        let request = engine.parse_request("s", DEMO_MESSAGE, 0).unwrap();
        let (_, episode) = engine.solve("run_a", &request, &mut WorkingMemory::new(), ExecutionMode::Parallel).unwrap();
        match episode.archived {
            Some(ArchiveOutcome::Archived { sop_id, .. }) => sop_id,
            other => panic!("{other:?}"),
        }
    };
    let kb = KnowledgeBase::load(&dir.path().join("kb")).unwrap();
    let sop = kb.sop(&sop_id).unwrap();
    assert_eq!(sop.provenance, Provenance::AutoArchived);
    assert!(!sop.source_slots.is_empty());

    let engine = demo_engine(dir.path(), Arc::new(ScriptedResolver::new([])));
    let request = engine.parse_request("s", DEMO_FOLLOWUP, 0).unwrap();
    let (outcome, episode) = engine.solve("run_b", &request, &mut WorkingMemory::new(), ExecutionMode::Parallel).unwrap();
    assert_eq!(outcome.path, PlanPath::Template { sop_id });
    assert_eq!(episode.status(), RunStatus::Succeeded);
}

#[test]
fn a_misspelled_column_is_corrected_within_the_replan_budget() {
    let dir = tempfile::tempdir().unwrap();
    let resolver = Arc::new(ScriptedResolver::new([demo_plan("amnt"), demo_plan("amt")]));
    let engine = demo_engine(dir.path(), resolver.clone());
    let request = engine.parse_request("s", DEMO_MESSAGE, 0).unwrap();
    let (_, episode) = engine.solve("run_fix", &request, &mut WorkingMemory::new(), ExecutionMode::Parallel).unwrap();

    assert_eq!(episode.status(), RunStatus::Succeeded);
    assert_eq!(episode.replans, 1);
    assert!(episode.replans <= 2);
    let first = &episode.runs[0];
    assert_eq!(first.status, RunStatus::Failed);
    assert_eq!(first.feedback.as_ref().unwrap().node_id, "transform");
    assert!(first.feedback.as_ref().unwrap().error_message.contains("amnt"));

    let kinds = kinds_of(&engine, "run_fix");
    assert_eq!(count(&kinds, EventKind::ReplanTriggered), 1);
    assert_eq!(count(&kinds, EventKind::RunStarted), 2);
    let replan = kinds.iter().position(|k| *k == EventKind::ReplanTriggered).unwrap();
    assert_eq!(
        &kinds[replan - 1..replan + 4],
        &[
            EventKind::RunFinished,
            EventKind::ReplanTriggered,
            EventKind::PlanStarted,
            EventKind::SopsRetrieved,
            EventKind::RunStarted
        ]
    );

    let requests = resolver.requests();
    assert_eq!(requests.len(), 2);
    assert!(requests[0].feedback.is_none());
    assert_eq!(requests[1].feedback.as_ref().unwrap().node_id, "transform");
    assert_eq!(requests[1].bindings, requests[0].bindings);
}

#[test]
fn the_rule_resolver_repairs_an_unknown_column() {
    let dir = tempfile::tempdir().unwrap();
    let engine = demo_engine(dir.path(), Arc::new(RuleResolver));
    let request = engine.parse_request("s", DEMO_MESSAGE, 0).unwrap();
    let log = engine.open_log("run_rule").unwrap();
    let episode = engine.run_with_correction(
        "run_rule",
        &request,
        demo_plan("amnt"),
        &mut WorkingMemory::new(),
        ExecutionMode::Parallel,
        &log,
    );
    assert_eq!(episode.status(), RunStatus::Succeeded);
    assert_eq!(episode.replans, 1);
    let fixed = episode.final_plan().node("transform").unwrap();
    assert_eq!(fixed.config["aggregations"], json!([{"op": "sum", "column": "amt"}]));
}

#[test]
fn replanning_stops_after_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let bad = ["amnt", "amnx", "amny", "amnz"].map(demo_plan);
    let resolver = Arc::new(ScriptedResolver::new(bad));
    let engine = demo_engine(dir.path(), resolver.clone());
    let request = engine.parse_request("s", DEMO_MESSAGE, 0).unwrap();
    let (_, episode) = engine.solve("run_stuck", &request, &mut WorkingMemory::new(), ExecutionMode::Parallel).unwrap();

    assert_eq!(episode.status(), RunStatus::Failed);
    assert_eq!(episode.replans, 2);
    assert_eq!(episode.runs.len(), 3);
    match &episode.error {
        Some(PlanError::GiveUp { traces }) => assert_eq!(traces.len(), 3),
        other => panic!("expected GiveUp, got {other:?}"),
    }
    assert_eq!(resolver.requests().len(), 3);
    let kinds = kinds_of(&engine, "run_stuck");
    assert_eq!(count(&kinds, EventKind::ReplanTriggered), 2);
    assert_eq!(*kinds.last().unwrap(), EventKind::RunFinished);
    assert!(episode.archived.is_none());
    assert_eq!(engine.kb.read().sops().count(), 0);
}

#[test]
fn an_unchanged_revision_ends_the_episode() {
    let dir = tempfile::tempdir().unwrap();
    let engine = demo_engine(dir.path(), Arc::new(ScriptedResolver::new([demo_plan("amnt"), demo_plan("amnt")])));
    let request = engine.parse_request("s", DEMO_MESSAGE, 0).unwrap();
    let (_, episode) = engine.solve("run_noop", &request, &mut WorkingMemory::new(), ExecutionMode::Parallel).unwrap();
    assert_eq!(episode.error, Some(PlanError::ResolverFailure("no-op revision".into())));
    assert_eq!(episode.runs.len(), 1);
}

#[test]
fn agent_scratch_context_never_reaches_the_planner() {
    const SCRATCH: &str = "scratch-token-5521";
    let dir = tempfile::tempdir().unwrap();
    let backend = Arc::new(ScriptedBackend::with_replies([
        format!("TOOL word_count {SCRATCH} {SCRATCH}"),
        "FINAL Margins are stable.".to_string(),
        format!("TOOL word_count {SCRATCH}"),
        "FINAL Margins are stable.".to_string(),
    ]));
    let with_agent = |measure: &str| {
        let mut plan = demo_plan(measure);
        plan.nodes.push(PlanNode::new("summarize", SummarizeAgent::TYPE_ID).link("context", "search_knowledge", "snippets"));
        let report = plan.node_mut("report").unwrap();
        *report = report.clone().link("summary", "summarize", "summary");
        plan
    };
    let resolver = Arc::new(ScriptedResolver::new([with_agent("amnt"), with_agent("amt")]));
    let options = EngineOptions { agent_backend: Some(backend.clone()), ..EngineOptions::default() };
    let engine = demo_engine_with(dir.path(), resolver.clone(), options);
    let request = engine.parse_request("s", DEMO_MESSAGE, 0).unwrap();
    let (_, episode) = engine.solve("run_agent", &request, &mut WorkingMemory::new(), ExecutionMode::Parallel).unwrap();

    assert_eq!(episode.status(), RunStatus::Succeeded);
    assert_eq!(episode.runs[0].record("summarize").unwrap().status, NodeStatus::Succeeded);
    let seen = serde_json::to_string(&backend.transcripts()).unwrap();
    assert!(seen.contains(SCRATCH), "the agent did use its private context");

    let to_planner = serde_json::to_string(&resolver.requests()).unwrap();
    assert!(!to_planner.contains(SCRATCH));
    assert!(!to_planner.contains("You summarize analysis context"));
    let events = serde_json::to_string(&engine.runs.get("run_agent").unwrap().snapshot(0)).unwrap();
    assert!(!events.contains(SCRATCH));
}

#[test]
fn unknown_bindings_are_reported_before_planning() {
    let dir = tempfile::tempdir().unwrap();
    let resolver = Arc::new(ScriptedResolver::new([]));
    let engine = demo_engine(dir.path(), resolver.clone());
    let err = engine.parse_request("s", "analyze @nonexistent", 0).unwrap_err();
    assert_eq!(err, flowgraph_core::planner::BindingError::UnknownBinding { name: "nonexistent".into() });
    assert!(resolver.requests().is_empty());
}

#[test]
fn manual_save_works_without_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let engine = demo_engine(dir.path(), Arc::new(RuleResolver));
    let mut plan = demo_plan("amt");
    plan.metadata.insert("bindings".into(), json!(["sales_db", "financial_metrics"]));
    plan.metadata.insert("request".into(), json!("Help me analyze the 2025 global sales performance"));
    let ArchiveOutcome::Archived { sop_id, new } = engine.planner.save_sop(&plan, "regional sales") else { panic!() };
    assert!(new);
    assert_eq!(engine.kb.read().sop(&sop_id).unwrap().provenance, Provenance::Manual);
}
