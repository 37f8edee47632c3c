use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use bayes_audit::AuditError;
use serde::{Deserialize, Serialize};

/// JSON error body: `{"error": {"code", "message", "details"}}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error(transparent)]
    Audit(#[from] AuditError),

    #[error("this service is read-only: no operator token is configured")]
    ReadOnly,

    #[error("operator token missing or wrong")]
    Forbidden,

    #[error("another mutation is in progress")]
    Busy,

    #[error("no job {0}")]
    UnknownJob(u64),

    #[error("malformed request body: {0}")]
    BadBody(String),

    #[error("background task failed: {0}")]
    Task(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        use AuditError as E;
        match self {
            ApiError::ReadOnly | ApiError::Forbidden => StatusCode::FORBIDDEN,
            ApiError::Busy => StatusCode::CONFLICT,
            ApiError::UnknownJob(_) => StatusCode::NOT_FOUND,
            ApiError::BadBody(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Task(_) => StatusCode::INTERNAL_SERVER_ERROR,
            ApiError::Audit(e) => match e {
                E::RoundIncomplete(_) | E::NoOpenRound => StatusCode::CONFLICT,
                E::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
                _ => StatusCode::BAD_REQUEST,
            },
        }
    }

    pub fn body(&self) -> ErrorBody {
        use AuditError as E;
        let (code, details) = match self {
            ApiError::ReadOnly => ("readOnly", Vec::new()),
            ApiError::Forbidden => ("forbidden", Vec::new()),
            ApiError::Busy => ("busy", Vec::new()),
            ApiError::UnknownJob(_) => ("unknownJob", Vec::new()),
            ApiError::BadBody(_) => ("badBody", Vec::new()),
            ApiError::Task(_) => ("internal", Vec::new()),
            ApiError::Audit(e) => match e {
                E::UnknownChoice { .. } => ("unknownChoice", Vec::new()),
                E::InvalidContest { .. } => ("invalidContest", Vec::new()),
                E::InvalidManifest(_) => ("invalidManifest", Vec::new()),
                E::InvalidAddress(_) => ("invalidAddress", Vec::new()),
                E::InvalidSeed(_) => ("invalidSeed", Vec::new()),
                E::DuplicateAddress(a) => ("duplicateAddress", vec![a.clone()]),
                E::InvalidCount(_) | E::NonIntegralCount { .. } => ("invalidCount", Vec::new()),
                E::InvalidConfig(findings) => ("invalidConfig", findings.clone()),
                E::NotSelected(a) => ("notSelected", vec![a.clone()]),
                E::AlreadyRecorded(a) => ("alreadyRecorded", vec![a.clone()]),
                E::MissingVote { address, .. } => ("missingVote", vec![address.clone()]),
                E::RoundIncomplete(missing) => ("roundIncomplete", missing.clone()),
                E::MissingCvr(a) => ("missingCvr", vec![a.clone()]),
                E::Planning(_) => ("planning", Vec::new()),
                E::NoOpenRound => ("noOpenRound", Vec::new()),
                E::Io(_) => ("io", Vec::new()),
                E::Json(_) => ("json", Vec::new()),
                _ => ("audit", Vec::new()),
            },
        };
        ErrorBody {
            code: code.to_owned(),
            message: self.to_string(),
            details,
        }
    }
}

#[derive(Serialize)]
struct Envelope {
    error: ErrorBody,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(Envelope { error: self.body() })).into_response()
    }
}
