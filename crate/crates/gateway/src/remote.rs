//! HTTP adapters for an external intent resolver and agent completion backend.
//! Both use blocking requests; they are only called from worker threads.

use std::time::Duration;

use flowgraph_core::nodes::{BackendError, CompletionBackend, Message};
use flowgraph_core::planner::{ResolveRequest, ResolverError};
use flowgraph_core::{parse_plan, IntentResolver, PlanDocument};
use serde_json::json;

const TIMEOUT: Duration = Duration::from_secs(60);

fn client() -> reqwest::Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder().timeout(TIMEOUT).build()
}

/// POSTs the resolve request as JSON; expects a plan document back.
#[derive(Debug, Clone)]
pub struct RemoteResolver {
    endpoint: String,
}

impl RemoteResolver {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteResolver { endpoint: endpoint.into() }
    }
}

impl IntentResolver for RemoteResolver {
    fn resolve(&self, request: &ResolveRequest) -> Result<PlanDocument, ResolverError> {
        let fail = |e: &dyn std::fmt::Display| ResolverError(format!("{}: {e}", self.endpoint));
        let response = client()
            .and_then(|c| c.post(&self.endpoint).json(request).send())
            .and_then(|r| r.error_for_status())
            .map_err(|e| fail(&e))?;
        let body = response.text().map_err(|e| fail(&e))?;
        parse_plan(&body).map_err(|e| fail(&e))
    }
}

/// POSTs `{"messages": [...]}`; accepts `{"text": ...}` or a plain-text body.
#[derive(Debug, Clone)]
pub struct RemoteAgentBackend {
    endpoint: String,
}

impl RemoteAgentBackend {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteAgentBackend { endpoint: endpoint.into() }
    }
}

impl CompletionBackend for RemoteAgentBackend {
    fn complete(&self, messages: &[Message]) -> Result<String, BackendError> {
        let response = client()
            .and_then(|c| c.post(&self.endpoint).json(&json!({"messages": messages})).send())
            .map_err(|e| if e.is_timeout() { BackendError::Timeout(e.to_string()) } else { BackendError::Failed(e.to_string()) })?;
        let status = response.status();
        let body = response.text().map_err(|e| BackendError::Failed(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Failed(format!("status {status}")));
        }
        match serde_json::from_str::<serde_json::Value>(&body) {
            Ok(v) => match v.get("text").and_then(|t| t.as_str()) {
                Some(text) => Ok(text.to_string()),
                None => Err(BackendError::Failed("response has no \"text\" field".into())),
            },
            Err(_) => Ok(body),
        }
    }
}
