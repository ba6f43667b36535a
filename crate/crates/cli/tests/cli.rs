//! Exit codes and output of the `flowgraph` binary.

use std::path::Path;
use std::process::{Command, Output};

use flowgraph_core::compiler::{PlanDocument, PlanNode};
use flowgraph_core::fixtures::{demo_plan, DEMO_DOCS, DEMO_FOLLOWUP, DEMO_MESSAGE, DEMO_SALES_CSV};
use flowgraph_core::Value;
use serde_json::{json, Value as Json};
use tempfile::TempDir;

fn flowgraph(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowgraph"))
        .args(args)
        .current_dir(dir)
        .env("FLOWGRAPH_RUNS_DIR", dir.join("runs"))
        .env("FLOWGRAPH_KB_DIR", dir.join("kb"))
        .env_remove("FLOWGRAPH_RESOLVER_ENDPOINT")
        .env_remove("FLOWGRAPH_SECRETS_FILE")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn json_out(out: &Output) -> Json {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(out)))
}

fn write(dir: &Path, name: &str, doc: &PlanDocument) -> String {
    std::fs::write(dir.join(name), serde_json::to_string(doc).unwrap()).unwrap();
    name.to_string()
}

/// Directory with the demo CSV and knowledge documents registered through the CLI.
fn demo_dir() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sales.csv"), DEMO_SALES_CSV).unwrap();
    assert_eq!(code(&flowgraph(dir.path(), &["source", "add", "sales_db", "sales.csv"])), 0);
    for (i, text) in DEMO_DOCS.iter().enumerate() {
        let name = format!("doc{i}.txt");
        std::fs::write(dir.path().join(&name), text).unwrap();
        assert_eq!(code(&flowgraph(dir.path(), &["kb", "ingest", "--collection", "financial_metrics", &name])), 0);
    }
    dir
}

fn diamond() -> PlanDocument {
    PlanDocument::new(
        "diamond",
        vec![
            PlanNode::new("read", "datasource.read").literal("source", Value::text("sales_db")),
            PlanNode::new("by_region", "table.transform").config("group_by", json!(["region"])).link("data", "read", "rows"),
            PlanNode::new("as_text", "table.transform").config("output_kind", json!("document")).link("data", "read", "rows"),
            PlanNode::new("report", "report.render").link("table", "by_region", "rows").link("summary", "as_text", "rows"),
        ],
    )
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let clean = write(p, "clean.json", &demo_plan("amt"));
    let out = flowgraph(p, &["validate", &clean]);
    assert_eq!(code(&out), 0);
    assert_eq!(json_out(&out)["pass"], json!(true));

    let cyclic = PlanDocument::new(
        "loop",
        vec![
            PlanNode::new("a", "table.transform").link("data", "b", "rows"),
            PlanNode::new("b", "table.transform").link("data", "a", "rows"),
        ],
    );
    let cyclic = write(p, "cyclic.json", &cyclic);
    let out = flowgraph(p, &["validate", &cyclic]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("\"CYCLE\""));
    let out = flowgraph(p, &["validate", &cyclic, "--pretty"]);
    assert!(stdout(&out).starts_with("FAIL"), "{}", stdout(&out));

    std::fs::write(p.join("broken.json"), "{\"plan_id\": ").unwrap();
    assert_eq!(code(&flowgraph(p, &["validate", "broken.json"])), 2);
    assert_eq!(code(&flowgraph(p, &["validate", "missing.json"])), 2);
    let unknown = write(p, "unknown.json", &PlanDocument::new("u", vec![PlanNode::new("x", "no.such.type")]));
    assert_eq!(code(&flowgraph(p, &["validate", &unknown])), 2);
}

#[test]
fn layer_listing() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let plan = write(p, "diamond.json", &diamond());
    let out = flowgraph(p, &["layers", &plan, "--pretty"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.starts_with("3 layers\n"), "{text}");
    assert!(text.contains("layer 1: as_text, by_region"), "{text}");
    assert_eq!(json_out(&flowgraph(p, &["layers", &plan]))["layers"].as_array().unwrap().len(), 3);
    let seq = json_out(&flowgraph(p, &["layers", &plan, "--mode", "sequential"]));
    assert_eq!(seq["layers"].as_array().unwrap().len(), 4);

    let empty = write(p, "empty.json", &PlanDocument::new("empty", vec![]));
    assert_eq!(stdout(&flowgraph(p, &["layers", &empty, "--pretty"])), "0 layers\n");
}

#[test]
fn run_summaries_and_exit_codes() {
    let dir = demo_dir();
    let p = dir.path();
    let plan = write(p, "demo.json", &demo_plan("amt"));
    for mode in ["parallel", "sequential"] {
        let out = flowgraph(p, &["run", &plan, "--mode", mode]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let summary = json_out(&out);
        assert_eq!(summary["status"], json!("succeeded"));
        assert_eq!(summary["mode"], json!(mode));
        assert!(summary["wall_ms"].is_u64());
        let nodes = summary["nodes"].as_array().unwrap();
        assert_eq!(nodes.len(), 5);
        assert!(nodes.iter().all(|n| n["attempts"] == json!(1) && !n["artifacts"].as_object().unwrap().is_empty()));
    }

    // a fatal failure skips everything downstream
    let fatal = PlanDocument::new(
        "fatal",
        vec![
            PlanNode::new("flaky", "util.flaky").config("fail_times", json!(1)).config("error_class", json!("fatal")),
            PlanNode::new("search", "knowledge.search").link("query", "flaky", "token"),
            PlanNode::new("other", "util.sleep").config("duration_ms", json!(0)),
        ],
    );
    let fatal = write(p, "fatal.json", &fatal);
    let out = flowgraph(p, &["run", &fatal]);
    assert_eq!(code(&out), 1);
    let summary = json_out(&out);
    assert_eq!(summary["skipped"], json!(["search"]));
    assert_eq!(summary["failed_node"], json!("flaky"));
    assert!(stdout(&flowgraph(p, &["run", &fatal, "--pretty"])).contains("skipped"));

    let rejected = PlanDocument::new("r", vec![PlanNode::new("t", "table.transform")]);
    let rejected = write(p, "rejected.json", &rejected);
    let out = flowgraph(p, &["run", &rejected]);
    assert_eq!(code(&out), 3);
    assert!(stdout(&out).contains("MISSING_INPUT"));
}

#[test]
fn retried_runs_show_retries_in_the_timeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let flaky = PlanDocument::new(
        "flaky",
        vec![PlanNode::new("flaky", "util.flaky").config("fail_times", json!(2)).config("error_class", json!("transient"))],
    );
    let plan = write(p, "flaky.json", &flaky);
    let out = flowgraph(p, &["run", &plan, "--backoff-ms", "1"]);
    assert_eq!(code(&out), 0);
    let run_id = json_out(&out)["run_id"].as_str().unwrap().to_string();
    assert_eq!(json_out(&out)["nodes"][0]["attempts"], json!(3));

    let timeline = stdout(&flowgraph(p, &["events", &run_id, "--pretty"]));
    assert_eq!(timeline.lines().filter(|l| l.contains("node_retried")).count(), 2, "{timeline}");
    // a run directory works as well as an id
    let by_dir = flowgraph(p, &["events", p.join("runs").join(&run_id).to_str().unwrap()]);
    let events: Vec<Json> = stdout(&by_dir).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.first().unwrap()["kind"], json!("run_started"));
    assert_eq!(events.last().unwrap()["kind"], json!("run_finished"));
    assert_eq!(code(&flowgraph(p, &["events", "run_nope"])), 2);
}

#[test]
fn planning_round_trip() {
    let dir = demo_dir();
    let p = dir.path();
    let out = flowgraph(p, &["plan", "--message", DEMO_MESSAGE, "-o", "first.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_out(&out)["path"], json!({"path": "synthesized"}));
    assert_eq!(code(&flowgraph(p, &["validate", "first.json"])), 0);

    assert_eq!(code(&flowgraph(p, &["plan", "--message", "chart @nowhere"])), 4);
    // an empty script makes the resolver fail
    std::fs::write(p.join("script.json"), "[]").unwrap();
    assert_eq!(code(&flowgraph(p, &["plan", "--message", DEMO_MESSAGE, "--script", "script.json"])), 4);

    let out = flowgraph(p, &["sop", "save", "first.json", "--description", "Help me analyze the 2025 global sales performance"]);
    assert_eq!(code(&out), 0);
    let sop_id = json_out(&out)["sop_id"].as_str().unwrap().to_string();
    let out = flowgraph(p, &["plan", "--message", DEMO_FOLLOWUP, "-o", "second.json"]);
    assert_eq!(json_out(&out)["metadata"]["sop_id"], json!(sop_id));
    let written: Json = serde_json::from_str(&std::fs::read_to_string(p.join("second.json")).unwrap()).unwrap();
    assert_eq!(written["metadata"]["sop_id"], json!(sop_id));
    assert_eq!(code(&flowgraph(p, &["run", "second.json"])), 0);
}

#[test]
fn scripted_plans_and_extra_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("sales.csv"), DEMO_SALES_CSV).unwrap();
    std::fs::write(p.join("sources.json"), r#"{"sources":[{"name":"sales_db","kind":"csv","path":"sales.csv"}]}"#).unwrap();
    std::fs::write(p.join("script.json"), serde_json::to_string(&[demo_plan("amt")]).unwrap()).unwrap();
    let out = flowgraph(p, &["plan", "--message", "revenue by region @sales_db", "--sources", "sources.json", "--script", "script.json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let written: Json = serde_json::from_str(&std::fs::read_to_string(p.join("plan.json")).unwrap()).unwrap();
    assert_eq!(written["nodes"].as_array().unwrap().len(), 5);
}

#[test]
fn sources_and_knowledge_commands() {
    let dir = demo_dir();
    let p = dir.path();
    assert_eq!(code(&flowgraph(p, &["source", "add", "sales_db", "sales.csv"])), 1);
    let list = json_out(&flowgraph(p, &["source", "list"]));
    let names: Vec<&str> = list.as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["financial_metrics", "sales_db"]);

    let hits = json_out(&flowgraph(p, &["kb", "search", "gross margin revenue", "-k", "1", "--collection", "financial_metrics"]));
    assert_eq!(hits["hits"][0]["text"], json!(DEMO_DOCS[0]));
}
