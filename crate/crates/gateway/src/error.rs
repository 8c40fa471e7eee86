//! Mapping of every module error onto one API code and HTTP status.

use std::path::PathBuf;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use fairgate_core::drift::DriftError;
use fairgate_core::error::Coded;
use fairgate_core::hitl::HitlError;
use fairgate_core::metrics::MetricsError;
use fairgate_core::model::ModelError;
use fairgate_core::rebalance::RebalanceError;
use fairgate_core::rollout::RolloutError;
use fairgate_core::simulator::SimError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Every code the API can return, with its HTTP status.
pub const ERROR_CODES: &[(&str, u16)] = &[
    // caller faults
    ("ParseError", 400),
    ("SchemaError", 400),
    ("ValidationError", 400),
    ("UnknownAttribute", 400),
    ("BadK", 400),
    ("InvalidPlan", 400),
    ("InvalidDataset", 400),
    ("UnknownMetric", 400),
    ("InvalidRule", 400),
    ("MissingCorrectedLabel", 400),
    ("InvalidSpec", 400),
    ("InvalidInjection", 400),
    ("BadRequest", 400),
    ("Unauthorized", 401),
    ("UnknownEvent", 404),
    ("UnknownItem", 404),
    ("UnknownScenario", 404),
    ("NotFound", 404),
    ("DuplicateEvent", 409),
    ("AlreadyJoined", 409),
    ("InvalidTransition", 409),
    ("RolloutNotRunning", 409),
    ("ExperimentNotActive", 409),
    ("AlreadyDecided", 409),
    ("Conflict", 409),
    ("MissingOutcome", 422),
    ("InsufficientData", 422),
    ("DegenerateDistribution", 422),
    ("TooFewSamples", 422),
    ("Overloaded", 429),
    // service faults
    ("CorruptLog", 500),
    ("IoError", 500),
    ("ConfigError", 500),
    ("BindError", 500),
    ("Internal", 500),
];

pub fn status_for(code: &str) -> Option<StatusCode> {
    ERROR_CODES
        .iter()
        .find(|(c, _)| *c == code)
        .and_then(|(_, s)| StatusCode::from_u16(*s).ok())
}

/// Errors raised by the gateway itself.
#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("config: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {reason}")]
    Bind { addr: String, reason: String },
    #[error("{}:{line}: {reason}", file.display())]
    CorruptLog { file: PathBuf, line: usize, reason: String },
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0} already exists")]
    Conflict(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("missing or invalid bearer token")]
    Unauthorized,
    #[error("ingestion queue full, retry later")]
    Overloaded,
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Internal(String),
}

impl GatewayError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        GatewayError::Io {
            context: context.into(),
            source,
        }
    }
}

impl Coded for GatewayError {
    fn code(&self) -> &'static str {
        match self {
            GatewayError::Config(_) => "ConfigError",
            GatewayError::Bind { .. } => "BindError",
            GatewayError::CorruptLog { .. } => "CorruptLog",
            GatewayError::NotFound(_) => "NotFound",
            GatewayError::Conflict(_) => "Conflict",
            GatewayError::BadRequest(_) => "BadRequest",
            GatewayError::Unauthorized => "Unauthorized",
            GatewayError::Overloaded => "Overloaded",
            GatewayError::Io { .. } => "IoError",
            GatewayError::Internal(_) => "Internal",
        }
    }
}

/// Wire form of an error: `{"code": ..., "message": ...}` plus the status.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn from_coded(e: &(impl Coded + std::fmt::Display)) -> Self {
        let code = e.code();
        ApiError {
            status: status_for(code).map_or(500, |s| s.as_u16()),
            code: code.to_string(),
            message: e.to_string(),
        }
    }

    pub fn is_client_fault(&self) -> bool {
        (400..500).contains(&self.status)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ApiError {}

macro_rules! from_coded {
    ($($t:ty),*) => {$(
        impl From<$t> for ApiError {
            fn from(e: $t) -> Self {
                ApiError::from_coded(&e)
            }
        }
    )*};
}

from_coded!(ModelError, MetricsError, DriftError, RebalanceError, RolloutError, HitlError, SimError, GatewayError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}
