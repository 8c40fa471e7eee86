//! Append-only event store with outcome joining.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::Serialize;

use super::event::{JoinedRecord, OutcomeEvent, PredictionEvent};
use super::ModelError;

/// Per-line failure while ingesting a JSON-lines document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineError {
    /// 1-based line number in the source document.
    pub line: usize,
    #[serde(serialize_with = "super::serialize_error")]
    pub error: ModelError,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestSummary {
    pub accepted: Vec<String>,
    pub errors: Vec<LineError>,
}

impl IngestSummary {
    pub fn count_errors(&self, pred: impl Fn(&ModelError) -> bool) -> usize {
        self.errors.iter().filter(|e| pred(&e.error)).count()
    }
}

/// Immutable view of the store at one point in time.
#[derive(Debug, Clone)]
pub struct StoreSnapshot {
    records: Arc<[JoinedRecord]>,
}

impl StoreSnapshot {
    pub fn records(&self) -> &[JoinedRecord] {
        &self.records
    }

    /// One `JoinedRecord` per line, in append order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in self.records.iter() {
            out.push_str(&serde_json::to_string(record).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

/// The system of record for predictions and their outcomes.
///
/// Records are kept in append order. Tumbling count windows of
/// `window_size` records are tracked so that a late outcome marks the window
/// it lands in as stale.
#[derive(Debug, Clone)]
pub struct EventStore {
    records: Vec<JoinedRecord>,
    index: HashMap<String, usize>,
    window_size: usize,
    stale: BTreeSet<usize>,
    outcomes: usize,
}

impl Default for EventStore {
    fn default() -> Self {
        EventStore::new(super::DEFAULT_WINDOW_SIZE)
    }
}

impl EventStore {
    pub fn new(window_size: usize) -> Self {
        EventStore {
            records: Vec::new(),
            index: HashMap::new(),
            window_size: window_size.max(1),
            stale: BTreeSet::new(),
            outcomes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn outcome_bearing(&self) -> usize {
        self.outcomes
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn records(&self) -> &[JoinedRecord] {
        &self.records
    }

    pub fn get(&self, event_id: &str) -> Option<&JoinedRecord> {
        self.index.get(event_id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, event_id: &str) -> bool {
        self.index.contains_key(event_id)
    }

    /// Parses one raw line and appends it.
    pub fn ingest_line(&mut self, line: &str) -> Result<String, ModelError> {
        let event = PredictionEvent::parse_line(line)?;
        self.ingest_event(event)
    }

    pub fn ingest_event(&mut self, event: PredictionEvent) -> Result<String, ModelError> {
        event.validate()?;
        if self.index.contains_key(&event.event_id) {
            return Err(ModelError::DuplicateEvent(event.event_id));
        }
        let id = event.event_id.clone();
        self.index.insert(id.clone(), self.records.len());
        self.records.push(JoinedRecord::pending(event));
        Ok(id)
    }

    /// Ingests every non-blank line, collecting per-line errors.
    pub fn ingest_jsonl(&mut self, text: &str) -> IngestSummary {
        let mut summary = IngestSummary::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match self.ingest_line(line) {
                Ok(id) => summary.accepted.push(id),
                Err(error) => summary.errors.push(LineError { line: n + 1, error }),
            }
        }
        summary
    }

    /// Attaches ground truth to a stored prediction.
    ///
    /// A second outcome for the same id is rejected and leaves the store
    /// untouched.
    pub fn join_outcome(&mut self, outcome: OutcomeEvent) -> Result<&JoinedRecord, ModelError> {
        let position = *self
            .index
            .get(&outcome.event_id)
            .ok_or_else(|| ModelError::UnknownEvent(outcome.event_id.clone()))?;
        let record = &mut self.records[position];
        if record.outcome_label.is_some() {
            return Err(ModelError::AlreadyJoined(outcome.event_id));
        }
        record.outcome_label = Some(outcome.outcome_label);
        record.observed_at = Some(outcome.observed_at);
        self.outcomes += 1;
        self.stale.insert(position / self.window_size);
        Ok(&self.records[position])
    }

    pub fn join_jsonl(&mut self, text: &str) -> IngestSummary {
        let mut summary = IngestSummary::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let joined = OutcomeEvent::parse_line(line).and_then(|o| {
                let id = o.event_id.clone();
                self.join_outcome(o).map(|_| id)
            });
            match joined {
                Ok(id) => summary.accepted.push(id),
                Err(error) => summary.errors.push(LineError { line: n + 1, error }),
            }
        }
        summary
    }

    /// Count-window indices whose metrics need recomputation.
    pub fn stale_windows(&self) -> Vec<usize> {
        self.stale.iter().copied().collect()
    }

    pub fn take_stale_windows(&mut self) -> Vec<usize> {
        std::mem::take(&mut self.stale).into_iter().collect()
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            records: self.records.clone().into(),
        }
    }
}
