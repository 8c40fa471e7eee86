//! Tumbling windows over stored records.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::event::JoinedRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WindowSpec {
    /// Consecutive runs of `size` records in append order.
    Count { size: usize },
    /// Buckets of `seconds` aligned to the Unix epoch, by prediction timestamp.
    Time { seconds: i64 },
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec::Count {
            size: super::DEFAULT_WINDOW_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowDescriptor {
    pub spec: WindowSpec,
    pub index: usize,
    pub records: usize,
    pub outcome_bearing: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<DateTime<Utc>>,
}

impl WindowDescriptor {
    pub fn describe(spec: WindowSpec, index: usize, records: &[JoinedRecord]) -> Self {
        let start = records.iter().map(|r| r.event.timestamp).min();
        let end = records.iter().map(|r| r.event.timestamp).max();
        WindowDescriptor {
            spec,
            index,
            records: records.len(),
            outcome_bearing: records.iter().filter(|r| r.has_outcome()).count(),
            start,
            end,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub descriptor: WindowDescriptor,
    pub records: Vec<JoinedRecord>,
}

impl Window {
    pub fn new(spec: WindowSpec, index: usize, records: Vec<JoinedRecord>) -> Self {
        Window {
            descriptor: WindowDescriptor::describe(spec, index, &records),
            records,
        }
    }
}

/// Splits records into tumbling windows. Empty input yields no windows.
pub fn tumbling_windows(records: &[JoinedRecord], spec: WindowSpec) -> Vec<Window> {
    match spec {
        WindowSpec::Count { size } => records
            .chunks(size.max(1))
            .enumerate()
            .map(|(i, chunk)| Window::new(spec, i, chunk.to_vec()))
            .collect(),
        WindowSpec::Time { seconds } => {
            let seconds = seconds.max(1);
            let mut buckets: BTreeMap<i64, Vec<JoinedRecord>> = BTreeMap::new();
            for record in records {
                let bucket = record.event.timestamp.timestamp().div_euclid(seconds);
                buckets.entry(bucket).or_default().push(record.clone());
            }
            buckets
                .into_values()
                .enumerate()
                .map(|(i, recs)| Window::new(spec, i, recs))
                .collect()
        }
    }
}

/// The most recent window, or an empty one when there are no records.
pub fn latest_window(records: &[JoinedRecord], spec: WindowSpec) -> Window {
    tumbling_windows(records, spec)
        .pop()
        .unwrap_or_else(|| Window::new(spec, 0, Vec::new()))
}
