use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use flowgraph_core::planner::BindingError;
use flowgraph_core::{CompileError, PlanError, ValidationReport};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("unknown plan {0:?}")]
    UnknownPlan(String),
    #[error("plan has no node {0:?}")]
    UnknownNode(String),
    #[error("unknown run {0:?}")]
    UnknownRun(String),
    #[error("unknown artifact {0:?}")]
    UnknownArtifact(String),
    #[error("a run is already in flight for this session: {0}")]
    Conflict(String),
    #[error(transparent)]
    Binding(#[from] BindingError),
    #[error("resolver failure: {0}")]
    Resolver(String),
    #[error(transparent)]
    Planning(PlanError),
    #[error("malformed patch: {0}")]
    MalformedPatch(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("plan does not compile: {0}")]
    Compile(#[from] CompileError),
    #[error("the latest revision does not validate")]
    ValidationFailed(ValidationReport),
    #[error("a source named {0:?} is already registered")]
    DuplicateName(String),
    #[error("cannot parse source: {0}")]
    SourceParse(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<PlanError> for ApiError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::ResolverFailure(m) => ApiError::Resolver(m),
            other => ApiError::Planning(other),
        }
    }
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownSession(_)
            | ApiError::UnknownPlan(_)
            | ApiError::UnknownNode(_)
            | ApiError::UnknownRun(_)
            | ApiError::UnknownArtifact(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) | ApiError::DuplicateName(_) => StatusCode::CONFLICT,
            ApiError::Binding(_) | ApiError::Compile(_) | ApiError::ValidationFailed(_) | ApiError::SourceParse(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ApiError::Planning(PlanError::SlotUnfillable { .. }) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Resolver(_) | ApiError::Planning(_) => StatusCode::BAD_GATEWAY,
            ApiError::MalformedPatch(_) | ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ApiError::UnknownSession(_) => "unknown_session",
            ApiError::UnknownPlan(_) => "unknown_plan",
            ApiError::UnknownNode(_) => "unknown_node",
            ApiError::UnknownRun(_) => "unknown_run",
            ApiError::UnknownArtifact(_) => "unknown_artifact",
            ApiError::Conflict(_) => "conflict",
            ApiError::Binding(BindingError::UnknownBinding { .. }) => "unknown_binding",
            ApiError::Binding(BindingError::AmbiguousBinding { .. }) => "ambiguous_binding",
            ApiError::Resolver(_) => "resolver_failure",
            ApiError::Planning(PlanError::SlotUnfillable { .. }) => "slot_unfillable",
            ApiError::Planning(_) => "planning_failed",
            ApiError::MalformedPatch(_) => "malformed_patch",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Compile(_) => "compile_error",
            ApiError::ValidationFailed(_) => "validation_failed",
            ApiError::DuplicateName(_) => "duplicate_name",
            ApiError::SourceParse(_) => "parse_error",
            ApiError::Internal(_) => "internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": self.code(), "message": self.to_string()});
        match &self {
            ApiError::Binding(b) => body["detail"] = json!(b),
            ApiError::ValidationFailed(report) => body["validation"] = json!(report),
            ApiError::Compile(e) => {
                let (node, key) = e.location();
                body["detail"] = json!({"node": node, "key": key});
            }
            _ => {}
        }
        (self.status(), Json(body)).into_response()
    }
}
