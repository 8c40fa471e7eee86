//! Stateful operations shared by the HTTP handlers and the CLI.
//!
//! Every mutation is validated first, persisted second and applied to memory
//! last, so a failed write never leaves memory ahead of disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use fairgate_core::drift::{drift_report, DriftReport};
use fairgate_core::error::Coded;
use fairgate_core::hitl::{
    DecisionKind, ExportFilter, FlagOptions, FlagRule, ItemStatus, QueueEvent, RetrainingRow, ReviewItem, ReviewQueue,
};
use fairgate_core::metrics::{parity_report, stratified_metrics, MetricsConfig, ParityReport, StratumMetrics};
use fairgate_core::model::{
    tumbling_windows, Environment, EventStore, JoinedRecord, Label, ModelError, NutritionLabel, OutcomeEvent,
    PredictionEvent, Window, WindowDescriptor, WindowSpec,
};
use fairgate_core::rebalance::{rebalance_by_subgroup, DatasetRow, RebalanceOutcome, ResamplePlan, Strategy};
use fairgate_core::rollout::{
    compare_arms, evaluate_gate, plan_canary, stratum_key, ArmKind, ArmMetrics, ArmTag, BlueGreenComparison, CanaryPlan,
    CanaryState, Cohort, ComparisonReport, GateConfig, KpiConfig, RolloutStatus, Stage, StageMetrics, Transition,
};
use fairgate_core::simulator::{builtin, run_scenario, ScenarioReport, ScenarioScript};
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;
use crate::error::{ApiError, GatewayError};
use crate::persist::{DataDir, RecoveredTail};

pub type Result<T> = std::result::Result<T, ApiError>;

// ---------------------------------------------------------------------------
// request / response bodies

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedLine {
    pub line: usize,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestResponse {
    pub accepted: usize,
    pub rejected: Vec<RejectedLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelResponse {
    pub model_version: String,
    pub label_version: String,
    pub subgroups: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowQuery {
    pub model_version: String,
    /// Attribute for stratified and parity queries.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    /// Tumbling-window index; the latest window when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedResponse {
    pub model_version: String,
    pub attribute: String,
    pub window: WindowDescriptor,
    pub strata: Vec<StratumMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRequest {
    pub rollout_id: String,
    pub model_version: String,
    /// Defaults to the configured schedule.
    #[serde(default)]
    pub stages: Option<Vec<Stage>>,
    #[serde(default)]
    pub gates: Option<GateConfig>,
    /// Defaults to the label's subgroup schema.
    #[serde(default)]
    pub cohort_attributes: Option<Vec<String>>,
    #[serde(default)]
    pub at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutView {
    #[serde(flatten)]
    pub state: CanaryState,
    pub current_fraction: f64,
    pub max_fraction: f64,
}

impl From<&CanaryState> for RolloutView {
    fn from(s: &CanaryState) -> Self {
        RolloutView {
            state: s.clone(),
            current_fraction: s.current_fraction(),
            max_fraction: s.max_fraction_reached(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub rollout_id: String,
    pub model_version: String,
    pub status: RolloutStatus,
    pub current_stage: usize,
    pub current_fraction: f64,
    pub transitions: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvanceRequest {
    pub at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbortRequest {
    pub reason: String,
    pub at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionResponse {
    pub transition: Transition,
    pub rollout: RolloutView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignRequest {
    pub subject_id: String,
    #[serde(default)]
    pub subgroup: BTreeMap<String, String>,
    #[serde(default)]
    pub salt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignResponse {
    pub subject_id: String,
    pub stratum: String,
    pub fraction: f64,
    pub cohort: Cohort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub name: String,
    #[serde(default = "model_arm")]
    pub kind: ArmKind,
    /// Store to read from; the comparison's model version when absent.
    #[serde(default)]
    pub model_version: Option<String>,
    #[serde(default)]
    pub environment: Option<Environment>,
}

fn model_arm() -> ArmKind {
    ArmKind::Model
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonRequest {
    pub comparison_id: String,
    /// Label (and default store) the comparison is judged against.
    pub model_version: String,
    pub blue: ArmSpec,
    pub green: ArmSpec,
    #[serde(default)]
    pub kpi: Option<KpiConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueueQuery {
    pub status: Option<ItemStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueResponse {
    pub pending: usize,
    pub items: Vec<ReviewItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlagRequest {
    pub model_version: String,
    #[serde(default)]
    pub window: Option<usize>,
    /// Defaults to the configured rules.
    #[serde(default)]
    pub rules: Option<Vec<FlagRule>>,
    #[serde(default)]
    pub min_count: Option<usize>,
    #[serde(default)]
    pub at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagResponse {
    pub items: Vec<ReviewItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub decision: DecisionKind,
    #[serde(default)]
    pub corrected_label: Option<Label>,
    pub reviewer: String,
    #[serde(default)]
    pub at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionResponse {
    pub item: ReviewItem,
    pub rows: Vec<RetrainingRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RebalanceRequest {
    pub rows: Vec<DatasetRow>,
    pub attribute: String,
    pub strategy: Strategy,
    /// SMOTE only: grow every class to the majority count.
    #[serde(default)]
    pub match_majority: bool,
    /// Explicit per-class targets; balanced targets when absent.
    #[serde(default)]
    pub targets: Option<BTreeMap<String, usize>>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    fairgate_core::rebalance::DEFAULT_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateRequest {
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub script: Option<ScenarioScript>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestoreReport {
    pub events: usize,
    pub outcomes: usize,
    pub labels: usize,
    pub rollouts: usize,
    pub comparisons: usize,
    pub review_events: usize,
    /// Torn final lines dropped during restore.
    pub recovered: Vec<RecoveredTail>,
}

/// Everything the service holds, for comparing a restored service with a live one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServiceSnapshot {
    pub labels: BTreeMap<String, NutritionLabel>,
    pub records: BTreeMap<String, Vec<JoinedRecord>>,
    pub rollouts: BTreeMap<String, CanaryState>,
    pub comparisons: BTreeMap<String, BlueGreenComparison>,
    pub queue: ReviewQueue,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

pub fn health() -> Health {
    Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    }
}

// ---------------------------------------------------------------------------

fn not_found(what: impl Into<String>) -> ApiError {
    GatewayError::NotFound(what.into()).into()
}

fn bad_request(what: impl Into<String>) -> ApiError {
    GatewayError::BadRequest(what.into()).into()
}

fn rejected(line: usize, e: &ModelError) -> RejectedLine {
    RejectedLine {
        line,
        code: e.code().into(),
        message: e.to_string(),
    }
}

pub struct Service {
    config: ServiceConfig,
    data: Option<DataDir>,
    stores: BTreeMap<String, EventStore>,
    labels: BTreeMap<String, NutritionLabel>,
    rollouts: BTreeMap<String, CanaryState>,
    comparisons: BTreeMap<String, BlueGreenComparison>,
    queue: ReviewQueue,
    restore: RestoreReport,
}

impl Service {
    /// In-memory service; nothing is written to disk.
    pub fn ephemeral(config: ServiceConfig) -> Self {
        Service {
            config,
            data: None,
            stores: BTreeMap::new(),
            labels: BTreeMap::new(),
            rollouts: BTreeMap::new(),
            comparisons: BTreeMap::new(),
            queue: ReviewQueue::new(),
            restore: RestoreReport::default(),
        }
    }

    /// Restores from `data`, which may be empty.
    pub fn open(config: ServiceConfig, data: DataDir) -> std::result::Result<Self, GatewayError> {
        let mut s = Service::ephemeral(config);
        s.restore_from(&data)?;
        s.data = Some(data);
        Ok(s)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn restore_report(&self) -> &RestoreReport {
        &self.restore
    }

    fn restore_from(&mut self, data: &DataDir) -> std::result::Result<(), GatewayError> {
        let mut report = RestoreReport::default();
        let keep_tail = |t: Option<RecoveredTail>, report: &mut RestoreReport| {
            if let Some(t) = t {
                report.recovered.push(t);
            }
        };

        for mv in data.subdirs("events")? {
            let window = self.config.window_size;
            let store = self.stores.entry(mv.clone()).or_insert_with(|| EventStore::new(window));
            let rel = data.events_log(&mv)?;
            let (lines, tail) = data.read_log(&rel)?;
            keep_tail(tail, &mut report);
            for (n, line) in lines {
                store.ingest_line(&line).map_err(|e| data.corrupt(&rel, n, e))?;
                report.events += 1;
            }
            let rel = data.outcomes_log(&mv)?;
            let (lines, tail) = data.read_log(&rel)?;
            keep_tail(tail, &mut report);
            for (n, line) in lines {
                let outcome = OutcomeEvent::parse_line(&line).map_err(|e| data.corrupt(&rel, n, e))?;
                store.join_outcome(outcome).map_err(|e| data.corrupt(&rel, n, e))?;
                report.outcomes += 1;
            }
            store.take_stale_windows();
        }

        for rel in data.list("labels", "json")? {
            let label: NutritionLabel = data.read_json(&rel)?;
            label.validate().map_err(|e| data.corrupt(&rel, 0, e))?;
            self.labels.insert(label.model_version.clone(), label);
            report.labels += 1;
        }

        for rel in data.list("rollouts", "log")? {
            let (lines, tail) = data.read_log(&rel)?;
            keep_tail(tail, &mut report);
            let mut lines = lines.into_iter();
            let Some((n, plan_line)) = lines.next() else { continue };
            let plan: CanaryPlan = serde_json::from_str(&plan_line).map_err(|e| data.corrupt(&rel, n, e))?;
            let mut state = plan_canary(plan).map_err(|e| data.corrupt(&rel, n, e))?;
            for (n, line) in lines {
                let t: Transition = serde_json::from_str(&line).map_err(|e| data.corrupt(&rel, n, e))?;
                state.apply(&t).map_err(|e| data.corrupt(&rel, n, e))?;
            }
            self.rollouts.insert(state.plan.rollout_id.clone(), state);
            report.rollouts += 1;
        }

        for rel in data.list("comparisons", "json")? {
            let c: BlueGreenComparison = data.read_json(&rel)?;
            self.comparisons.insert(c.comparison_id.clone(), c);
            report.comparisons += 1;
        }

        let rel = data.review_log();
        let (lines, tail) = data.read_log(&rel)?;
        keep_tail(tail, &mut report);
        for (n, line) in lines {
            let event: QueueEvent = serde_json::from_str(&line).map_err(|e| data.corrupt(&rel, n, e))?;
            self.queue.apply_event(event).map_err(|e| data.corrupt(&rel, n, e))?;
            report.review_events += 1;
        }
        self.restore = report;
        Ok(())
    }

    fn append_line(&self, rel: impl FnOnce(&DataDir) -> std::result::Result<PathBuf, GatewayError>, line: &str) -> Result<()> {
        if let Some(d) = &self.data {
            d.append_line(&rel(d)?, line)?;
        }
        Ok(())
    }

    fn append_json<T: Serialize>(&self, rel: &Path, value: &T) -> Result<()> {
        if let Some(d) = &self.data {
            d.append_json(rel, value)?;
        }
        Ok(())
    }

    fn replace_json<T: Serialize>(&self, rel: &Path, value: &T) -> Result<()> {
        if let Some(d) = &self.data {
            d.replace_json(rel, value)?;
        }
        Ok(())
    }

    fn paths(&self) -> DataDir {
        self.data.clone().unwrap_or_else(|| DataDir::new(""))
    }

    // -- ingestion ---------------------------------------------------------

    /// Ingests prediction events (JSON lines); bad lines are reported, good
    /// ones kept.
    pub fn ingest_events(&mut self, text: &str) -> Result<IngestResponse> {
        let mut accepted = 0;
        let mut rejected_lines = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event = match PredictionEvent::parse_line(line) {
                Ok(e) => e,
                Err(e) => {
                    rejected_lines.push(rejected(i + 1, &e));
                    continue;
                }
            };
            if let Err(e) = crate::persist::safe_component(&event.model_version) {
                rejected_lines.push(RejectedLine {
                    line: i + 1,
                    code: "SchemaError".into(),
                    message: e.to_string(),
                });
                continue;
            }
            let window = self.config.window_size;
            let mv = event.model_version.clone();
            if self.stores.get(&mv).is_some_and(|s| s.contains(&event.event_id)) {
                rejected_lines.push(rejected(i + 1, &ModelError::DuplicateEvent(event.event_id.clone())));
                continue;
            }
            let canonical = serde_json::to_string(&event).map_err(|e| GatewayError::Internal(e.to_string()))?;
            self.append_line(|d| d.events_log(&mv), &canonical)?;
            self.stores
                .entry(mv)
                .or_insert_with(|| EventStore::new(window))
                .ingest_event(event)
                .expect("checked for duplicates and schema");
            accepted += 1;
        }
        Ok(IngestResponse {
            accepted,
            rejected: rejected_lines,
        })
    }

    fn store_of(&self, event_id: &str) -> Option<&str> {
        self.stores
            .iter()
            .find(|(_, s)| s.contains(event_id))
            .map(|(mv, _)| mv.as_str())
    }

    pub fn ingest_outcomes(&mut self, text: &str) -> Result<IngestResponse> {
        let mut accepted = 0;
        let mut rejected_lines = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let outcome = match OutcomeEvent::parse_line(line) {
                Ok(o) => o,
                Err(e) => {
                    rejected_lines.push(rejected(i + 1, &e));
                    continue;
                }
            };
            let Some(mv) = self.store_of(&outcome.event_id).map(str::to_string) else {
                rejected_lines.push(rejected(i + 1, &ModelError::UnknownEvent(outcome.event_id.clone())));
                continue;
            };
            if self.stores[&mv].get(&outcome.event_id).is_some_and(|r| r.has_outcome()) {
                rejected_lines.push(rejected(i + 1, &ModelError::AlreadyJoined(outcome.event_id.clone())));
                continue;
            }
            let canonical = serde_json::to_string(&outcome).map_err(|e| GatewayError::Internal(e.to_string()))?;
            self.append_line(|d| d.outcomes_log(&mv), &canonical)?;
            self.stores
                .get_mut(&mv)
                .expect("found above")
                .join_outcome(outcome)
                .expect("checked above");
            accepted += 1;
        }
        Ok(IngestResponse {
            accepted,
            rejected: rejected_lines,
        })
    }

    pub fn put_label(&mut self, model_version: &str, document: &str) -> Result<LabelResponse> {
        let label = NutritionLabel::from_json(document)?;
        if label.model_version != model_version {
            return Err(ModelError::Validation(format!(
                "label is for model `{}`, not `{model_version}`",
                label.model_version
            ))
            .into());
        }
        let rel = self.paths().label_file(model_version)?;
        self.replace_json(&rel, &label)?;
        let response = LabelResponse {
            model_version: model_version.into(),
            label_version: label.label_version.clone(),
            subgroups: label.subgroups.len(),
        };
        self.labels.insert(model_version.into(), label);
        Ok(response)
    }

    pub fn label(&self, model_version: &str) -> Result<&NutritionLabel> {
        self.labels
            .get(model_version)
            .ok_or_else(|| not_found(format!("label for model `{model_version}`")))
    }

    // -- queries -------------------------------------------------------------

    fn window(&self, model_version: &str, index: Option<usize>) -> Result<Window> {
        let store = self
            .stores
            .get(model_version)
            .ok_or_else(|| not_found(format!("events for model `{model_version}`")))?;
        let spec = WindowSpec::Count {
            size: self.config.window_size,
        };
        let mut windows = tumbling_windows(store.records(), spec);
        match index {
            None => windows.pop().ok_or_else(|| not_found(format!("events for model `{model_version}`"))),
            Some(i) if i < windows.len() => Ok(windows.swap_remove(i)),
            Some(i) => Err(not_found(format!("window {i} of model `{model_version}`"))),
        }
    }

    fn attribute(&self, q: &WindowQuery) -> Result<String> {
        match &q.attribute {
            Some(a) => Ok(a.clone()),
            None => self
                .label(&q.model_version)?
                .subgroup_schema
                .first()
                .cloned()
                .ok_or_else(|| bad_request("attribute is required")),
        }
    }

    pub fn stratified(&self, q: &WindowQuery) -> Result<StratifiedResponse> {
        let attribute = self.attribute(q)?;
        let window = self.window(&q.model_version, q.window)?;
        let schema = match self.labels.get(&q.model_version) {
            Some(l) => l.subgroup_schema.clone(),
            None => vec![attribute.clone()],
        };
        let strata = stratified_metrics(&window.records, &attribute, &schema)?;
        Ok(StratifiedResponse {
            model_version: q.model_version.clone(),
            attribute,
            window: window.descriptor,
            strata,
        })
    }

    pub fn parity(&self, q: &WindowQuery) -> Result<ParityReport> {
        let attribute = self.attribute(q)?;
        let label = self.label(&q.model_version)?;
        let window = self.window(&q.model_version, q.window)?;
        Ok(parity_report(
            &window,
            &attribute,
            label,
            &MetricsConfig {
                min_count: self.config.min_count,
            },
        )?)
    }

    pub fn drift(&self, q: &WindowQuery) -> Result<DriftReport> {
        let label = self.label(&q.model_version)?;
        let window = self.window(&q.model_version, q.window)?;
        Ok(drift_report(label, &window, &self.config.thresholds, self.config.min_count))
    }

    // -- rollouts ------------------------------------------------------------

    pub fn create_rollout(&mut self, req: RolloutRequest) -> Result<RolloutView> {
        crate::persist::safe_component(&req.rollout_id)?;
        if self.rollouts.contains_key(&req.rollout_id) {
            return Err(GatewayError::Conflict(format!("rollout `{}`", req.rollout_id)).into());
        }
        let cohort_attributes = match req.cohort_attributes {
            Some(a) => a,
            None => self.label(&req.model_version)?.subgroup_schema.clone(),
        };
        let plan = CanaryPlan {
            rollout_id: req.rollout_id.clone(),
            model_version: req.model_version,
            stages: req.stages.unwrap_or_else(|| self.config.canary_stages.clone()),
            gates: req.gates.unwrap_or_else(|| GateConfig {
                min_count: self.config.min_count,
                ..GateConfig::default()
            }),
            cohort_attributes,
        };
        let mut state = plan_canary(plan)?;
        let start = state.start(req.at.unwrap_or_else(Utc::now))?.clone();
        let rel = self.paths().rollout_log(&req.rollout_id)?;
        self.append_json(&rel, &state.plan)?;
        self.append_json(&rel, &start)?;
        let view = RolloutView::from(&state);
        self.rollouts.insert(req.rollout_id, state);
        Ok(view)
    }

    pub fn rollout(&self, id: &str) -> Result<RolloutView> {
        self.rollouts
            .get(id)
            .map(RolloutView::from)
            .ok_or_else(|| not_found(format!("rollout `{id}`")))
    }

    pub fn list_rollouts(&self) -> Vec<RolloutSummary> {
        self.rollouts
            .values()
            .map(|s| RolloutSummary {
                rollout_id: s.plan.rollout_id.clone(),
                model_version: s.plan.model_version.clone(),
                status: s.status,
                current_stage: s.current_stage,
                current_fraction: s.current_fraction(),
                transitions: s.log.len(),
            })
            .collect()
    }

    /// Canary records of the running stage.
    fn stage_records(&self, state: &CanaryState) -> Vec<JoinedRecord> {
        let Some(store) = self.stores.get(&state.plan.model_version) else {
            return Vec::new();
        };
        let since = state.stage_started_at;
        store
            .records()
            .iter()
            .filter(|r| r.event.rollout_id.as_deref() == Some(state.id()))
            .filter(|r| r.event.environment == Environment::Canary)
            .filter(|r| since.is_none_or(|t| r.event.timestamp >= t))
            .cloned()
            .collect()
    }

    fn commit_transition(&mut self, id: &str, next: CanaryState) -> Result<TransitionResponse> {
        let transition = next.log.last().expect("transition recorded").clone();
        let rel = self.paths().rollout_log(id)?;
        self.append_json(&rel, &transition)?;
        let rollout = RolloutView::from(&next);
        self.rollouts.insert(id.to_string(), next);
        Ok(TransitionResponse { transition, rollout })
    }

    /// Evaluates the gate on the current stage and applies the result.
    pub fn advance_rollout(&mut self, id: &str, req: AdvanceRequest) -> Result<TransitionResponse> {
        let state = self.rollouts.get(id).ok_or_else(|| not_found(format!("rollout `{id}`")))?;
        if state.status != RolloutStatus::Running {
            return Err(fairgate_core::rollout::RolloutError::InvalidTransition(format!(
                "rollout `{id}` is {:?}",
                state.status
            ))
            .into());
        }
        let now = req.at.unwrap_or_else(Utc::now);
        let label = self.label(&state.plan.model_version)?;
        let records = self.stage_records(state);
        let elapsed = state.stage_started_at.map_or(0, |t| (now - t).num_seconds());
        let metrics = StageMetrics::from_records(
            &records,
            &state.plan.cohort_attributes,
            label,
            state.plan.gates.min_count,
            elapsed,
        );
        let gate = evaluate_gate(state, &metrics, label);
        let mut next = state.clone();
        next.advance(gate, now)?;
        self.commit_transition(id, next)
    }

    pub fn abort_rollout(&mut self, id: &str, req: AbortRequest) -> Result<TransitionResponse> {
        let state = self.rollouts.get(id).ok_or_else(|| not_found(format!("rollout `{id}`")))?;
        let mut next = state.clone();
        let reason = if req.reason.is_empty() { "operator abort".to_string() } else { req.reason };
        next.abort(reason, req.at.unwrap_or_else(Utc::now))?;
        self.commit_transition(id, next)
    }

    pub fn assign(&self, id: &str, req: &AssignRequest) -> Result<AssignResponse> {
        let state = self.rollouts.get(id).ok_or_else(|| not_found(format!("rollout `{id}`")))?;
        let stratum = stratum_key(&req.subgroup, &state.plan.cohort_attributes);
        let salt = req.salt.as_deref().unwrap_or(id);
        let cohort = state.assign_cohort(&req.subject_id, &stratum, salt)?;
        Ok(AssignResponse {
            subject_id: req.subject_id.clone(),
            stratum,
            fraction: state.current_fraction(),
            cohort,
        })
    }

    // -- blue / green --------------------------------------------------------

    fn arm_records(&self, arm: &ArmSpec, default_mv: &str) -> Result<Vec<JoinedRecord>> {
        let mv = arm.model_version.as_deref().unwrap_or(default_mv);
        let store = self
            .stores
            .get(mv)
            .ok_or_else(|| not_found(format!("events for model `{mv}`")))?;
        Ok(store
            .records()
            .iter()
            .filter(|r| arm.environment.is_none_or(|e| r.event.environment == e))
            .cloned()
            .collect())
    }

    pub fn create_comparison(&mut self, req: ComparisonRequest) -> Result<BlueGreenComparison> {
        crate::persist::safe_component(&req.comparison_id)?;
        if self.comparisons.contains_key(&req.comparison_id) {
            return Err(GatewayError::Conflict(format!("comparison `{}`", req.comparison_id)).into());
        }
        let label = self.label(&req.model_version)?;
        let mut kpi = req.kpi.unwrap_or_default();
        if kpi.attribute.is_empty() {
            kpi.attribute = label
                .subgroup_schema
                .first()
                .cloned()
                .ok_or_else(|| bad_request("kpi.attribute is required"))?;
        }
        let arm = |spec: &ArmSpec| -> Result<ArmMetrics> {
            let records = self.arm_records(spec, &req.model_version)?;
            let tag = ArmTag {
                name: spec.name.clone(),
                kind: spec.kind,
            };
            Ok(ArmMetrics::compute(tag, &records, label, &kpi)?)
        };
        let blue = arm(&req.blue)?;
        let green = arm(&req.green)?;
        let report: ComparisonReport = compare_arms(&blue, &green, label, &kpi);
        let comparison = BlueGreenComparison {
            comparison_id: req.comparison_id.clone(),
            kpi,
            report,
        };
        let rel = self.paths().comparison_file(&req.comparison_id)?;
        self.replace_json(&rel, &comparison)?;
        self.comparisons.insert(req.comparison_id, comparison.clone());
        Ok(comparison)
    }

    pub fn comparison(&self, id: &str) -> Result<BlueGreenComparison> {
        self.comparisons
            .get(id)
            .cloned()
            .ok_or_else(|| not_found(format!("comparison `{id}`")))
    }

    // -- review --------------------------------------------------------------

    pub fn review_queue(&self, q: &QueueQuery) -> QueueResponse {
        QueueResponse {
            pending: self.queue.pending().count(),
            items: self
                .queue
                .items()
                .filter(|i| q.status.is_none_or(|s| i.status == s))
                .cloned()
                .collect(),
        }
    }

    pub fn flag(&mut self, req: FlagRequest) -> Result<FlagResponse> {
        let label = self.label(&req.model_version)?;
        let window = self.window(&req.model_version, req.window)?;
        let rules = req.rules.unwrap_or_else(|| self.config.flag_rules.clone());
        let options = FlagOptions {
            min_count: req.min_count.unwrap_or(self.config.min_count),
        };
        let mut next = self.queue.clone();
        let items = next.flag(&window, label, &rules, &options, req.at.unwrap_or_else(Utc::now))?;
        let rel = self.paths().review_log();
        for item in &items {
            self.append_json(&rel, &QueueEvent::Flagged { item: Box::new(item.clone()) })?;
        }
        self.queue = next;
        Ok(FlagResponse { items })
    }

    pub fn decide(&mut self, item_id: &str, req: DecisionRequest) -> Result<DecisionResponse> {
        let mut next = self.queue.clone();
        let (item, rows) = next.apply_decision(
            item_id,
            req.decision,
            req.corrected_label,
            &req.reviewer,
            req.at.unwrap_or_else(Utc::now),
        )?;
        let event = QueueEvent::Decided {
            item_id: item_id.to_string(),
            decision: item.decision.clone().expect("decided"),
        };
        let rel = self.paths().review_log();
        self.append_json(&rel, &event)?;
        self.queue = next;
        Ok(DecisionResponse { item, rows })
    }

    pub fn export(&self, filter: &ExportFilter) -> String {
        self.queue.export_retraining_set(filter)
    }

    pub fn queue(&self) -> &ReviewQueue {
        &self.queue
    }

    pub fn store(&self, model_version: &str) -> Option<&EventStore> {
        self.stores.get(model_version)
    }

    pub fn snapshot(&self) -> ServiceSnapshot {
        ServiceSnapshot {
            labels: self.labels.clone(),
            records: self.stores.iter().map(|(mv, s)| (mv.clone(), s.records().to_vec())).collect(),
            rollouts: self.rollouts.clone(),
            comparisons: self.comparisons.clone(),
            queue: self.queue.clone(),
        }
    }
}

// -- stateless operations ----------------------------------------------------

pub fn rebalance(req: RebalanceRequest) -> Result<RebalanceOutcome> {
    let plan = match req.targets {
        Some(targets) => ResamplePlan {
            strategy: req.strategy,
            targets,
            k: req.k,
            seed: req.seed,
        },
        None => {
            let mut counts = BTreeMap::new();
            for row in &req.rows {
                if let Some(c) = row.subgroup.get(&req.attribute) {
                    *counts.entry(c.clone()).or_insert(0usize) += 1;
                }
            }
            ResamplePlan::balanced(req.strategy, &counts, req.match_majority, req.k, req.seed)
        }
    };
    Ok(rebalance_by_subgroup(&req.rows, &req.attribute, &plan)?)
}

pub fn simulate(req: SimulateRequest) -> Result<ScenarioReport> {
    let script = match (req.scenario, req.script) {
        (Some(name), None) => builtin(&name)?,
        (None, Some(script)) => script,
        _ => return Err(bad_request("give exactly one of `scenario` or `script`")),
    };
    let script = match req.seed {
        Some(seed) => script.with_seed(seed),
        None => script,
    };
    Ok(run_scenario(&script)?)
}
