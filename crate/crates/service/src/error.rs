use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use revbio_core::{LifecycleError, RegistryError, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    UnknownIdentity,
    AlreadyEnrolled,
    PoolExhausted,
    DimMismatch,
    BadRequest,
    Unauthorized,
    Internal,
}

impl ErrorCode {
    pub fn status(self) -> StatusCode {
        match self {
            Self::UnknownIdentity => StatusCode::NOT_FOUND,
            Self::AlreadyEnrolled => StatusCode::CONFLICT,
            Self::PoolExhausted => StatusCode::SERVICE_UNAVAILABLE,
            Self::DimMismatch | Self::BadRequest => StatusCode::BAD_REQUEST,
            Self::Unauthorized => StatusCode::UNAUTHORIZED,
            Self::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

/// Error body: `{"http_status": .., "machine_code": .., "message": ..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub http_status: u16,
    pub machine_code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            http_status: code.status().as_u16(),
            machine_code: code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.machine_code.status(), Json(self)).into_response()
    }
}

pub fn registry_code(e: &RegistryError) -> ErrorCode {
    use RegistryError as R;
    match e {
        R::UnknownIdentity(_) => ErrorCode::UnknownIdentity,
        R::AlreadyEnrolled(_) | R::DuplicateInstance(_) => ErrorCode::AlreadyEnrolled,
        R::InstancePoolExhausted(_) => ErrorCode::PoolExhausted,
        R::DimMismatch { .. } => ErrorCode::DimMismatch,
        R::UnknownInstance(_) | R::Template(_) => ErrorCode::BadRequest,
        R::MissingThreshold(_)
        | R::InstanceReuse { .. }
        | R::StaleRevocation { .. }
        | R::VersionMismatch { .. }
        | R::CorruptSnapshot(_)
        | R::CorruptJournal(_)
        | R::Io(_) => ErrorCode::Internal,
    }
}

pub fn sim_code(e: &SimError) -> ErrorCode {
    use SimError as S;
    match e {
        S::DimMismatch { .. } => ErrorCode::DimMismatch,
        S::UnknownInstance(_)
        | S::IndexOutOfRange { .. }
        | S::UnknownGroup(_)
        | S::UnresolvableCapture(_)
        | S::MissingRecord { .. }
        | S::Embedding(_)
        | S::Parse { .. } => ErrorCode::BadRequest,
        S::InvalidConfig(_) | S::Unreachable { .. } | S::Metrics(_) | S::Io(_) => {
            ErrorCode::Internal
        }
    }
}

impl From<LifecycleError> for ApiError {
    fn from(e: LifecycleError) -> Self {
        let code = match &e {
            LifecycleError::Registry(r) => registry_code(r),
            LifecycleError::Extraction(s) => sim_code(s),
        };
        if code == ErrorCode::Internal {
            log::error!("internal error: {e}");
        }
        Self::new(code, e.to_string())
    }
}
