//! Prediction and outcome events as they appear on the wire.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::ModelError;

/// A binary label, encoded as `0` / `1` on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Negative => Label::Positive,
            Label::Positive => Label::Negative,
        }
    }
}

impl From<bool> for Label {
    fn from(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

impl From<Label> for u8 {
    fn from(label: Label) -> u8 {
        match label {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

/// Serving environment an event was scored in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Environment {
    Stable,
    Canary,
    Blue,
    Green,
    Treatment,
    Control,
}

impl Environment {
    pub fn as_str(self) -> &'static str {
        match self {
            Environment::Stable => "stable",
            Environment::Canary => "canary",
            Environment::Blue => "blue",
            Environment::Green => "green",
            Environment::Treatment => "treatment",
            Environment::Control => "control",
        }
    }
}

impl std::str::FromStr for Environment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown environment `{s}`"))
    }
}

/// A logged feature value: either numeric or categorical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Number(f64),
    Category(String),
}

/// One scored model decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionEvent {
    pub event_id: String,
    pub timestamp: DateTime<Utc>,
    pub model_version: String,
    pub environment: Environment,
    /// Protected-attribute name to category.
    pub subgroup: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<BTreeMap<String, FeatureValue>>,
    pub score: f64,
    pub predicted_label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollout_id: Option<String>,
}

impl PredictionEvent {
    /// Checks the invariants serde cannot express.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.event_id.trim().is_empty() {
            return Err(ModelError::Schema("event_id must be non-empty".into()));
        }
        if !self.score.is_finite() || !(0.0..=1.0).contains(&self.score) {
            return Err(ModelError::Schema(format!(
                "score {} outside [0, 1] for event `{}`",
                self.score, self.event_id
            )));
        }
        if let Some(features) = &self.features {
            for (name, value) in features {
                if let FeatureValue::Number(x) = value {
                    if !x.is_finite() {
                        return Err(ModelError::Schema(format!(
                            "feature `{name}` is not finite for event `{}`",
                            self.event_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Category of `attribute`, if the event carries it.
    pub fn category(&self, attribute: &str) -> Option<&str> {
        self.subgroup.get(attribute).map(String::as_str)
    }

    pub fn parse_line(line: &str) -> Result<Self, ModelError> {
        let event: PredictionEvent =
            serde_json::from_str(line).map_err(|e| ModelError::Parse(e.to_string()))?;
        event.validate()?;
        Ok(event)
    }
}

/// Ground truth for an earlier prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeEvent {
    pub event_id: String,
    pub outcome_label: Label,
    pub observed_at: DateTime<Utc>,
}

impl OutcomeEvent {
    pub fn parse_line(line: &str) -> Result<Self, ModelError> {
        serde_json::from_str(line).map_err(|e| ModelError::Parse(e.to_string()))
    }
}

/// A prediction together with its outcome, once one has arrived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinedRecord {
    pub event: PredictionEvent,
    #[serde(default)]
    pub outcome_label: Option<Label>,
    #[serde(default)]
    pub observed_at: Option<DateTime<Utc>>,
}

impl JoinedRecord {
    pub fn pending(event: PredictionEvent) -> Self {
        JoinedRecord {
            event,
            outcome_label: None,
            observed_at: None,
        }
    }

    pub fn has_outcome(&self) -> bool {
        self.outcome_label.is_some()
    }

    pub fn event_id(&self) -> &str {
        &self.event.event_id
    }
}
