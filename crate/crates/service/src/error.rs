use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use inrprop::{Error, Stage};
use serde::Serialize;

/// An error response: status code, message and, for engine failures, the
/// pipeline stage that raised it.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub stage: Option<Stage>,
}

#[derive(Serialize)]
struct Body<'a> {
    error: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage: Option<String>,
}

impl ApiError {
    pub fn not_found(what: impl std::fmt::Display) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            message: format!("unknown {what}"),
            stage: None,
        }
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::CONFLICT,
            message: message.into(),
            stage: None,
        }
    }

    pub fn unprocessable(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
            stage: None,
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
            stage: None,
        }
    }
}

/// Outermost stage tag in an error chain.
pub fn stage_of(e: &Error) -> Option<Stage> {
    match e {
        Error::Stage { stage, .. } => Some(*stage),
        Error::Item { source, .. } | Error::InFile { source, .. } => stage_of(source),
        _ => None,
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e.root() {
            Error::Config(_)
            | Error::Contract(_)
            | Error::DegenerateMask(_)
            | Error::Format { .. }
            | Error::Schema { .. }
            | Error::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            message: e.to_string(),
            stage: stage_of(&e),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Body {
            error: &self.message,
            stage: self.stage.map(|s| s.to_string()),
        };
        (self.status, Json(body)).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;
