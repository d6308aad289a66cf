use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Error)]
pub enum ServiceError {
    #[error("unauthenticated: {0}")]
    Unauthenticated(String),

    #[error("token expired")]
    TokenExpired,

    #[error("forbidden: {0}")]
    Forbidden(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("lease error: {0}")]
    Lease(String),

    #[error("validation failed on {} field(s)", .0.len())]
    Validation(Vec<FieldError>),

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            Self::Unauthenticated(_) | Self::TokenExpired => 401,
            Self::Forbidden(_) => 403,
            Self::NotFound(_) => 404,
            Self::Conflict(_) | Self::Lease(_) => 409,
            Self::Validation(_) | Self::BadRequest(_) => 400,
            Self::Integrity(_) | Self::Internal(_) => 500,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::Unauthenticated(_) => "unauthenticated",
            Self::TokenExpired => "token_expired",
            Self::Forbidden(_) => "forbidden",
            Self::NotFound(_) => "not_found",
            Self::Conflict(_) => "conflict",
            Self::Lease(_) => "lease_error",
            Self::Validation(_) => "validation",
            Self::BadRequest(_) => "bad_request",
            Self::Integrity(_) => "integrity",
            Self::Internal(_) => "internal",
        }
    }

    /// Wire form: `{"code", "message"}` plus `reason` for denials and
    /// `errors` for validation failures.
    pub fn to_json(&self) -> serde_json::Value {
        let mut body = serde_json::json!({ "code": self.code(), "message": self.to_string() });
        match self {
            Self::Forbidden(reason) => body["reason"] = reason.clone().into(),
            Self::Validation(errors) => body["errors"] = serde_json::to_value(errors).unwrap_or_default(),
            _ => {}
        }
        body
    }
}

impl From<fedx_core::error::Error> for ServiceError {
    fn from(e: fedx_core::error::Error) -> Self {
        use fedx_core::error::Error as E;
        match e {
            E::Config(m) => Self::BadRequest(m),
            E::Format(m) => Self::BadRequest(format!("malformed encoding: {m}")),
            other => Self::Internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        Self::Internal(e.to_string())
    }
}
