use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use serde_json::json;

use altar_core::blob::BlobError;
use altar_core::model::{ConfigError, IllegalTransition, MetricError};
use altar_core::store::StoreError;

/// An error as returned to HTTP clients: `{"error": code, "message": text}`.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{status} {code}: {message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", message)
    }

    pub fn immutable(run_id: i64) -> Self {
        Self::new(StatusCode::CONFLICT, "ImmutableRecord", format!("run {run_id} is terminal"))
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "Unauthorized", "missing or invalid bearer token")
    }

    pub fn storage_full() -> Self {
        Self::new(StatusCode::INSUFFICIENT_STORAGE, "StorageFull", "no space left on the data volume")
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": self.code, "message": self.message}).to_string();
        (self.status, [("content-type", "application/json")], body).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::StorageFull => ApiError::storage_full(),
            StoreError::NotFound { .. } => ApiError::not_found(e.to_string()),
            StoreError::ImmutableRecord(id) => ApiError::immutable(id),
            StoreError::DuplicateId { .. } => ApiError::new(StatusCode::CONFLICT, "Conflict", e.to_string()),
            StoreError::LimitExceeded(_) => ApiError::new(StatusCode::BAD_REQUEST, "LimitExceeded", e.to_string()),
            StoreError::InvalidDocument(inner) => inner.into(),
            StoreError::NotAnObject => ApiError::bad_request(e.to_string()),
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl From<BlobError> for ApiError {
    fn from(e: BlobError) -> Self {
        match e {
            BlobError::StorageFull => ApiError::storage_full(),
            BlobError::NotFound(_) => ApiError::not_found(e.to_string()),
            BlobError::InvalidUid(_) => ApiError::bad_request(e.to_string()),
            BlobError::HashMismatch { .. } => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "HashMismatch", e.to_string())
            }
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl From<ConfigError> for ApiError {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::KeyInvalid { .. } => "KeyInvalid",
            ConfigError::DepthExceeded { .. } => "DepthExceeded",
            _ => "InvalidConfig",
        };
        ApiError::new(StatusCode::BAD_REQUEST, code, e.to_string())
    }
}

impl From<IllegalTransition> for ApiError {
    fn from(e: IllegalTransition) -> Self {
        ApiError::new(StatusCode::CONFLICT, "IllegalTransition", e.to_string())
    }
}

impl From<MetricError> for ApiError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::NonMonotonicStep { .. } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "NonMonotonicStep", e.to_string())
            }
            MetricError::NonFinite { .. } => ApiError::bad_request(e.to_string()),
        }
    }
}

impl From<std::io::Error> for ApiError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::StorageFull {
            ApiError::storage_full()
        } else {
            ApiError::internal(e.to_string())
        }
    }
}
