//! `flowgraph`: headless driver for the engine.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |---|---|
//! | 0 | success (validation passed, run succeeded, ...) |
//! | 1 | validation errors, failed run, cyclic plan, or another runtime error |
//! | 2 | unreadable or unparseable input, or a usage error |
//! | 3 | run rejected by the validation gate |
//! | 4 | planning error (unknown/ambiguous binding, resolver failure) |
//!
//! Output is JSON unless `--pretty` is given.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowgraph_core::executor::{load_events, NodeStatus, RetryPolicy, RunConfig, RunState};
use flowgraph_core::planner::ArchiveOutcome;
use flowgraph_core::{
    compute_layers, new_id, parse_plan, sequentialize, Engine, ExecutionMode, IntentResolver, PlanDocument, PlanPath,
    RunStatus, ScriptedResolver, SourceCatalog, ValidationReport, WorkingMemory,
};
use flowgraph_gateway::GatewayConfig;
use serde_json::{json, Value as Json};
use thiserror::Error;

#[derive(Parser)]
#[command(name = "flowgraph", version, about = "Compile, validate, layer, run and plan flowgraph workflows")]
struct Cli {
    /// Human-readable output instead of JSON.
    #[arg(long, global = true)]
    pretty: bool,
    #[command(flatten)]
    env: EnvArgs,
    #[command(subcommand)]
    command: Command,
}

/// Same settings as the gateway; flags override the environment.
#[derive(Args)]
struct EnvArgs {
    #[arg(long, global = true, env = "FLOWGRAPH_RUNS_DIR", default_value = "runs")]
    runs_dir: PathBuf,
    #[arg(long = "kb", global = true, env = "FLOWGRAPH_KB_DIR", default_value = "kb")]
    kb_dir: PathBuf,
    #[arg(long, global = true, env = "FLOWGRAPH_SECRETS_FILE")]
    secrets: Option<PathBuf>,
    #[arg(long, global = true, env = "FLOWGRAPH_RESOLVER_ENDPOINT")]
    resolver_endpoint: Option<String>,
    #[arg(long, global = true, env = "FLOWGRAPH_AGENT_ENDPOINT")]
    agent_endpoint: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Parallel,
    Sequential,
}

impl From<Mode> for ExecutionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Parallel => ExecutionMode::Parallel,
            Mode::Sequential => ExecutionMode::Sequential,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compile and validate a plan file; prints the validation report.
    Validate { plan: PathBuf },
    /// Print the execution layers of a plan file.
    Layers {
        plan: PathBuf,
        #[arg(long, value_enum, default_value = "parallel")]
        mode: Mode,
    },
    /// Execute a plan file and print a run summary.
    Run {
        plan: PathBuf,
        #[arg(long, value_enum, default_value = "parallel")]
        mode: Mode,
        #[arg(long, default_value_t = 3)]
        max_retries: u32,
        /// Base retry backoff; doubles per attempt.
        #[arg(long, default_value_t = 100)]
        backoff_ms: u64,
        #[arg(long)]
        worker_cap: Option<usize>,
    },
    /// Plan a request against the registered sources and knowledge base.
    Plan {
        #[arg(long)]
        message: String,
        /// Sources manifest to load in addition to the one in the KB directory.
        #[arg(long)]
        sources: Option<PathBuf>,
        /// JSON array of plan documents answered in order instead of a live resolver.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long, short, default_value = "plan.json")]
        out: PathBuf,
    },
    /// Print the event timeline of a run (a run directory or a run id).
    Events { run: PathBuf },
    #[command(subcommand)]
    Source(SourceCommand),
    #[command(subcommand)]
    Kb(KbCommand),
    #[command(subcommand)]
    Sop(SopCommand),
    /// Start the HTTP gateway.
    Serve {
        #[arg(long, env = "FLOWGRAPH_PORT", default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Subcommand)]
enum SourceCommand {
    /// Register a CSV file under an @-mention name.
    Add { name: String, path: PathBuf },
    List,
}

#[derive(Subcommand)]
enum KbCommand {
    /// Embed and store a document (from a file, or `-` for stdin).
    Ingest {
        #[arg(long)]
        collection: String,
        file: PathBuf,
        #[arg(long)]
        tag: Vec<String>,
    },
    Search {
        query: String,
        #[arg(long, short, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        collection: Option<String>,
    },
}

#[derive(Subcommand)]
enum SopCommand {
    /// Archive a plan file as a reusable workflow.
    Save {
        plan: PathBuf,
        #[arg(long)]
        description: String,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Planning(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Input(_) => 2,
            CliError::Planning(_) => 4,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

type CliResult = Result<u8, CliError>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("{}", json!({"error": e.to_string()}));
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    let pretty = cli.pretty;
    let env = &cli.env;
    match cli.command {
        Command::Validate { plan } => cmd_validate(env, &plan, pretty),
        Command::Layers { plan, mode } => cmd_layers(env, &plan, mode.into(), pretty),
        Command::Run { plan, mode, max_retries, backoff_ms, worker_cap } => {
            let config = RunConfig {
                policy: RetryPolicy { max_retries, base_backoff: Duration::from_millis(backoff_ms), jitter: false },
                worker_cap,
            };
            cmd_run(env, &plan, mode.into(), config, pretty)
        }
        Command::Plan { message, sources, script, out } => {
            cmd_plan(env, &message, sources.as_deref(), script.as_deref(), &out, pretty)
        }
        Command::Events { run } => cmd_events(env, &run, pretty),
        Command::Source(SourceCommand::Add { name, path }) => {
            let engine = engine(env, None)?;
            let reg = engine.register_csv(&name, &path).map_err(runtime)?;
            emit(pretty, &json!(reg), || format!("registered @{} ({} columns)", reg.name, reg.columns.len()));
            Ok(0)
        }
        Command::Source(SourceCommand::List) => {
            let engine = engine(env, None)?;
            let list = engine.catalog.list();
            emit(pretty, &json!(list), || {
                list.iter().map(|r| format!("@{}  {:?}", r.name, r.kind)).collect::<Vec<_>>().join("\n")
            });
            Ok(0)
        }
        Command::Kb(KbCommand::Ingest { collection, file, tag }) => {
            let text = if file == Path::new("-") {
                std::io::read_to_string(std::io::stdin()).map_err(|e| CliError::Input(e.to_string()))?
            } else {
                read(&file)?
            };
            let doc_id = engine(env, None)?.ingest_document(&collection, &text, tag).map_err(runtime)?;
            emit(pretty, &json!({"doc_id": doc_id}), || doc_id.clone());
            Ok(0)
        }
        Command::Kb(KbCommand::Search { query, k, collection }) => {
            let engine = engine(env, None)?;
            let kb = engine.kb.read();
            let hits = kb.search_knowledge(&query, k, collection.as_deref());
            let rows: Vec<Json> = hits
                .iter()
                .map(|h| {
                    let doc = kb.document(&h.doc_id);
                    json!({"doc_id": h.doc_id, "score": h.score, "text": doc.map(|d| d.text.as_str())})
                })
                .collect();
            emit(pretty, &json!({"hits": rows}), || {
                rows.iter()
                    .map(|r| format!("{:.4}  {}  {}", r["score"].as_f64().unwrap_or(0.0), r["doc_id"], r["text"]))
                    .collect::<Vec<_>>()
                    .join("\n")
            });
            Ok(0)
        }
        Command::Sop(SopCommand::Save { plan, description }) => {
            let engine = engine(env, None)?;
            let doc = load_plan(&plan)?;
            let analysis = engine.analyze(&doc).map_err(|e| CliError::Input(e.to_string()))?;
            if !analysis.report.pass {
                print_report(&analysis.report, pretty);
                return Ok(1);
            }
            match engine.planner.save_sop(&doc, &description) {
                ArchiveOutcome::Archived { sop_id, new } => {
                    engine.persist().map_err(runtime)?;
                    emit(pretty, &json!({"sop_id": sop_id, "new": new}), || format!("saved {sop_id}"));
                    Ok(0)
                }
                ArchiveOutcome::Skipped => Err(runtime("workflow was not archived")),
            }
        }
        Command::Serve { port } => {
            let config = GatewayConfig { port, ..gateway_config(env) };
            let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
            rt.block_on(flowgraph_gateway::serve(config)).map_err(runtime)?;
            Ok(0)
        }
    }
}

fn gateway_config(env: &EnvArgs) -> GatewayConfig {
    GatewayConfig {
        port: 8080,
        runs_dir: env.runs_dir.clone(),
        kb_dir: env.kb_dir.clone(),
        resolver_endpoint: env.resolver_endpoint.clone(),
        agent_endpoint: env.agent_endpoint.clone(),
        secrets_file: env.secrets.clone(),
    }
}

fn engine(env: &EnvArgs, resolver: Option<Arc<dyn IntentResolver>>) -> Result<Engine, CliError> {
    let config = gateway_config(env);
    let resolver = resolver.unwrap_or_else(|| config.resolver());
    let vault = config.vault().map_err(|e| CliError::Input(e.to_string()))?;
    Engine::new(config.engine_options(), resolver, vault).map_err(runtime)
}

fn emit(pretty: bool, value: &Json, human: impl FnOnce() -> String) {
    if pretty {
        println!("{}", human());
    } else {
        println!("{value}");
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_plan(path: &Path) -> Result<PlanDocument, CliError> {
    parse_plan(&read(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn code_str(code: impl serde::Serialize) -> String {
    serde_json::to_value(code).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

fn print_report(report: &ValidationReport, pretty: bool) {
    if !pretty {
        println!("{}", report.to_json());
        return;
    }
    println!("{}", if report.pass { "PASS" } else { "FAIL" });
    for d in &report.diagnostics {
        let at = match &d.port {
            Some(p) => format!("{}.{p}", d.node),
            None => d.node.clone(),
        };
        println!("  {:<7} {:<18} {at}: {}", code_str(d.severity), code_str(d.code), d.detail);
    }
}

fn cmd_validate(env: &EnvArgs, path: &Path, pretty: bool) -> CliResult {
    let doc = load_plan(path)?;
    let analysis = engine(env, None)?.analyze(&doc).map_err(|e| CliError::Input(e.to_string()))?;
    print_report(&analysis.report, pretty);
    Ok(if analysis.report.pass { 0 } else { 1 })
}

fn cmd_layers(env: &EnvArgs, path: &Path, mode: ExecutionMode, pretty: bool) -> CliResult {
    let doc = load_plan(path)?;
    let graph = flowgraph_core::compile(&doc, &engine(env, None)?.registry).map_err(|e| CliError::Input(e.to_string()))?;
    let layers = compute_layers(&graph).map_err(runtime)?;
    let layers = match mode {
        ExecutionMode::Parallel => layers,
        ExecutionMode::Sequential => sequentialize(&layers),
    };
    if pretty {
        println!("{} layers", layers.layers.len());
        for (i, layer) in layers.layers.iter().enumerate() {
            println!("  layer {i}: {}", layer.join(", "));
        }
    } else {
        println!("{}", layers.to_json());
    }
    Ok(0)
}

fn run_summary(state: &RunState) -> Json {
    let nodes: Vec<Json> = state
        .node_records
        .values()
        .map(|r| {
            json!({
                "node_id": r.node_id,
                "status": r.status,
                "attempts": r.attempts,
                "artifacts": r.outputs,
            })
        })
        .collect();
    let skipped: Vec<&str> =
        state.node_records.values().filter(|r| r.status == NodeStatus::Skipped).map(|r| r.node_id.as_str()).collect();
    let mut summary = json!({
        "run_id": state.run_id,
        "status": state.status,
        "mode": state.mode,
        "wall_ms": state.wall_ms,
        "nodes": nodes,
        "skipped": skipped,
    });
    if let Some(report) = &state.validation {
        summary["validation"] = json!(report);
    }
    if let Some(trace) = &state.feedback {
        summary["failed_node"] = json!(trace.node_id);
        summary["error"] = json!(trace.error_message);
    }
    summary
}

fn cmd_run(env: &EnvArgs, path: &Path, mode: ExecutionMode, config: RunConfig, pretty: bool) -> CliResult {
    let doc = load_plan(path)?;
    let engine = engine(env, None)?;
    let analysis = engine.analyze(&doc).map_err(|e| CliError::Input(e.to_string()))?;
    let run_id = new_id("run");
    let log = engine.open_log(&run_id).map_err(runtime)?;
    let state = engine.execute(&run_id, &analysis, mode, &config, &log);
    log.close();
    let summary = run_summary(&state);
    emit(pretty, &summary, || {
        let mut out = format!("run {}  {}  {} ms  ({})\n", state.run_id, state.status.as_str(), state.wall_ms, code_str(state.mode));
        for r in state.node_records.values() {
            let artifacts: Vec<&str> = r.outputs.values().map(String::as_str).collect();
            out += &format!("  {:<20} {:<13} attempts={}  {}\n", r.node_id, code_str(r.status), r.attempts, artifacts.join(" "));
        }
        if let Some(report) = &state.validation {
            for d in report.errors() {
                out += &format!("  rejected: {} at {}: {}\n", code_str(d.code), d.node, d.detail);
            }
        }
        out.trim_end().to_string()
    });
    Ok(match state.status {
        RunStatus::Succeeded => 0,
        RunStatus::Rejected => 3,
        _ => 1,
    })
}

fn cmd_plan(
    env: &EnvArgs,
    message: &str,
    sources: Option<&Path>,
    script: Option<&Path>,
    out: &Path,
    pretty: bool,
) -> CliResult {
    let resolver: Option<Arc<dyn IntentResolver>> = match script {
        Some(path) => {
            let plans: Vec<Json> = serde_json::from_str(&read(path)?).map_err(|e| CliError::Input(e.to_string()))?;
            let plans = plans
                .iter()
                .map(|p| parse_plan(&p.to_string()))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            Some(Arc::new(ScriptedResolver::new(plans)))
        }
        None => None,
    };
    let engine = engine(env, resolver)?;
    if let Some(manifest) = sources {
        let extra = SourceCatalog::load_manifest(manifest).map_err(|e| CliError::Input(e.to_string()))?;
        for reg in extra.list() {
            if !engine.catalog.contains(&reg.name) {
                engine.catalog.register(reg).map_err(runtime)?;
            }
        }
    }
    let request = engine.parse_request("cli", message, 0).map_err(|e| CliError::Planning(e.to_string()))?;
    let outcome = engine
        .planner
        .plan(&request, &mut WorkingMemory::default())
        .map_err(|e| CliError::Planning(e.to_string()))?;
    let text = serde_json::to_string_pretty(&outcome.plan).map_err(runtime)?;
    std::fs::write(out, text + "\n").map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let sop_id = match &outcome.path {
        PlanPath::Template { sop_id } => Some(sop_id.clone()),
        PlanPath::Synthesized => None,
    };
    let summary = json!({
        "path": outcome.path,
        "plan_id": outcome.plan.plan_id,
        "nodes": outcome.plan.nodes.len(),
        "out": out,
        "metadata": outcome.plan.metadata,
    });
    emit(pretty, &summary, || match &sop_id {
        Some(id) => format!("template {id} -> {}", out.display()),
        None => format!("synthesized -> {}", out.display()),
    });
    Ok(0)
}

fn cmd_events(env: &EnvArgs, run: &Path, pretty: bool) -> CliResult {
    let dir = if run.is_dir() { run.to_path_buf() } else { env.runs_dir.join(run) };
    let file = dir.join("events.jsonl");
    let events = load_events(&file).map_err(|e| CliError::Input(format!("{}: {e}", file.display())))?;
    let mut stdout = std::io::stdout().lock();
    for e in &events {
        let line = if pretty {
            let node = e.node_id().unwrap_or("");
            let mut rest = e.payload.clone();
            if let Some(obj) = rest.as_object_mut() {
                obj.remove("node_id");
            }
            format!("{:>4}  {:<17} {:<20} {}", e.seq, e.kind.as_str(), node, rest)
        } else {
            serde_json::to_string(e).map_err(runtime)?
        };
        // a closed pipe (`| head`) ends the listing
        if writeln!(stdout, "{line}").is_err() {
            break;
        }
    }
    Ok(0)
}
