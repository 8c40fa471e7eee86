//! Event schema, outcome joining, the nutrition-label manifest and the
//! append-only event store.

mod event;
mod label;
mod store;
mod window;

pub use event::{Environment, FeatureValue, JoinedRecord, Label, OutcomeEvent, PredictionEvent};
pub use label::{Band, NutritionLabel, SubgroupEntry, SHARE_TOLERANCE};
pub use store::{EventStore, IngestSummary, LineError, StoreSnapshot};
pub use window::{latest_window, tumbling_windows, Window, WindowDescriptor, WindowSpec};

use thiserror::Error;

use crate::error::Coded;

pub const DEFAULT_WINDOW_SIZE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("malformed record: {0}")]
    Parse(String),
    #[error("event `{0}` already stored")]
    DuplicateEvent(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("no stored event with id `{0}`")]
    UnknownEvent(String),
    #[error("event `{0}` already has an outcome")]
    AlreadyJoined(String),
    #[error("invalid nutrition label: {0}")]
    Validation(String),
}

impl Coded for ModelError {
    fn code(&self) -> &'static str {
        match self {
            ModelError::Parse(_) => "ParseError",
            ModelError::DuplicateEvent(_) => "DuplicateEvent",
            ModelError::Schema(_) => "SchemaError",
            ModelError::UnknownEvent(_) => "UnknownEvent",
            ModelError::AlreadyJoined(_) => "AlreadyJoined",
            ModelError::Validation(_) => "ValidationError",
        }
    }
}

pub(crate) fn serialize_error<S, E>(error: &E, serializer: S) -> Result<S::Ok, S::Error>
where
    S: serde::Serializer,
    E: Coded + std::fmt::Display,
{
    use serde::ser::SerializeStruct;
    let mut s = serializer.serialize_struct("Error", 2)?;
    s.serialize_field("code", error.code())?;
    s.serialize_field("message", &error.to_string())?;
    s.end()
}
