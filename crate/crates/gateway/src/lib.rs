//! HTTP control plane over [`flowgraph_core::Engine`].
//!
//! Endpoints (all JSON unless noted):
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/sessions` | new session |
//! | GET | `/sessions/{id}` | transcript, current plan, runs |
//! | POST | `/sessions/{id}/messages` | `{text}` → plan, graph, layer plan, validation |
//! | POST | `/plans` | `{plan, plan_id?}` full (re)submission |
//! | GET | `/plans/{id}` | latest revision plus the revision history |
//! | GET | `/plans/{id}/validation`, `/plans/{id}/layers?mode=` | exact report / layer bytes |
//! | PUT | `/plans/{id}/nodes/{node_id}` | `{config, literals}` patch, revalidated |
//! | POST | `/runs` | `{plan_id, mode?}` |
//! | GET | `/runs/{id}` | run record |
//! | GET | `/runs/{id}/events?from_seq=&follow=` | NDJSON event stream |
//! | GET/POST | `/sources` | list / register (`{name, kind, path?, content?}`) |
//! | POST | `/knowledge/documents` | `{collection, text, tags?}` |
//! | GET | `/knowledge/search?q=&k=&collection=` | ranked hits |
//! | GET | `/artifacts/{id}` | `{meta, value}` |
//! | POST | `/sops` | `{plan_id, description}` manual archive |
//! | GET | `/catalog` | node specs |
//!
//! Generated ids are `ses_`, `plan_` and `run_` followed by a UUIDv7, so they
//! sort by creation time.

mod error;
pub mod remote;
mod routes;
mod state;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use flowgraph_core::executor::runs_dir_from_env;
use flowgraph_core::{Engine, EngineError, EngineOptions, IntentResolver, RuleResolver, SecretVault};
use thiserror::Error;

pub use error::ApiError;
pub use remote::{RemoteAgentBackend, RemoteResolver};
pub use routes::router;
pub use state::{Gateway, Origin, Revision, RunRecord, Session};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid FLOWGRAPH_PORT {0:?}")]
    Port(String),
    #[error("cannot read secrets file {path}: {source}")]
    Secrets { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Settings shared by the gateway and the CLI, read from `FLOWGRAPH_*`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayConfig {
    pub port: u16,
    pub runs_dir: PathBuf,
    pub kb_dir: PathBuf,
    pub resolver_endpoint: Option<String>,
    pub agent_endpoint: Option<String>,
    pub secrets_file: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            port: 8080,
            runs_dir: PathBuf::from("runs"),
            kb_dir: PathBuf::from("kb"),
            resolver_endpoint: None,
            agent_endpoint: None,
            secrets_file: None,
        }
    }
}

fn env_nonempty(key: &str) -> Option<String> {
    std::env::var(key).ok().filter(|v| !v.trim().is_empty())
}

impl GatewayConfig {
    pub fn from_env() -> Result<Self, ConfigError> {
        let port = match env_nonempty("FLOWGRAPH_PORT") {
            Some(p) => p.parse().map_err(|_| ConfigError::Port(p))?,
            None => 8080,
        };
        Ok(GatewayConfig {
            port,
            runs_dir: runs_dir_from_env(),
            kb_dir: env_nonempty("FLOWGRAPH_KB_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("kb")),
            resolver_endpoint: env_nonempty("FLOWGRAPH_RESOLVER_ENDPOINT"),
            agent_endpoint: env_nonempty("FLOWGRAPH_AGENT_ENDPOINT"),
            secrets_file: env_nonempty("FLOWGRAPH_SECRETS_FILE").map(PathBuf::from),
        })
    }

    pub fn vault(&self) -> Result<SecretVault, ConfigError> {
        let mut vault = SecretVault::new().with_env_fallback();
        if let Some(path) = &self.secrets_file {
            vault.load_file(path).map_err(|source| ConfigError::Secrets { path: path.clone(), source })?;
        }
        Ok(vault)
    }

    /// The remote resolver when an endpoint is configured, else the rule resolver.
    pub fn resolver(&self) -> Arc<dyn IntentResolver> {
        match &self.resolver_endpoint {
            Some(url) => Arc::new(RemoteResolver::new(url.clone())),
            None => Arc::new(RuleResolver),
        }
    }

    pub fn engine_options(&self) -> EngineOptions {
        EngineOptions {
            runs_dir: Some(self.runs_dir.clone()),
            kb_dir: Some(self.kb_dir.clone()),
            agent_backend: self
                .agent_endpoint
                .as_ref()
                .map(|url| Arc::new(RemoteAgentBackend::new(url.clone())) as Arc<dyn flowgraph_core::nodes::CompletionBackend>),
            ..EngineOptions::default()
        }
    }

    pub fn build_engine(&self) -> Result<Engine, ConfigError> {
        Ok(Engine::new(self.engine_options(), self.resolver(), self.vault()?)?)
    }

    pub fn build_gateway(&self) -> Result<Gateway, ConfigError> {
        Ok(Gateway::new(self.build_engine()?, self.kb_dir.join("uploads")))
    }
}

/// Binds `0.0.0.0:<port>` and serves until the process exits.
pub async fn serve(config: GatewayConfig) -> Result<(), ConfigError> {
    let gateway = Arc::new(tokio::task::block_in_place(|| config.build_gateway())?);
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("flowgraph gateway listening on {addr}");
    axum::serve(listener, router(gateway)).await?;
    Ok(())
}
