//! Synthetic populations and scripted scenarios.
//!
//! Every event is generated from its own ChaCha stream (stream number = event
//! index), so an injection that starts at index `n` leaves the first `n`
//! events byte-identical and a `(spec, seed)` pair fixes the whole stream.

use std::collections::{BTreeMap, VecDeque};

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drift::{drift_report, DistributionSnapshot, DriftReport, DriftStatus, DriftThresholds, TriageHint};
use crate::error::Coded;
use crate::metrics::{group_rates, ConfusionMatrix, GroupRates, RateMetric};
use crate::model::{
    tumbling_windows, Band, Environment, EventStore, FeatureValue, JoinedRecord, Label, NutritionLabel,
    OutcomeEvent, PredictionEvent, SubgroupEntry, WindowSpec,
};
use crate::rollout::{
    compare_arms, evaluate_gate, plan_canary, stratum_key, ArmKind, ArmMetrics, ArmTag, CanaryPlan,
    Cohort, ComparisonReport, Decision, GateConfig, KpiConfig, RolloutStatus, StageMetrics, Stage, Transition,
    TransitionKind,
};

/// Name of the continuous feature every generated event carries.
pub const SIGNAL_FEATURE: &str = "signal";

pub const DEFAULT_OUTCOME_LAG: usize = 100;

const BASELINE_SAMPLE: usize = 2000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid population spec: {0}")]
    InvalidSpec(String),
    #[error("invalid drift injection: {0}")]
    InvalidInjection(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
}

impl Coded for SimError {
    fn code(&self) -> &'static str {
        match self {
            SimError::InvalidSpec(_) => "InvalidSpec",
            SimError::InvalidInjection(_) => "InvalidInjection",
            SimError::UnknownScenario(_) => "UnknownScenario",
        }
    }
}

/// `P(Ŷ=1 | Y=1)` and `P(Ŷ=1 | Y=0)` for one subgroup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBehavior {
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureShape {
    pub mean: f64,
    pub sd: f64,
}

impl Default for FeatureShape {
    fn default() -> Self {
        FeatureShape { mean: 0.0, sd: 1.0 }
    }
}

/// The per-subgroup parameters that injections can replace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub priors: BTreeMap<String, f64>,
    /// `P(Y=1)` per subgroup.
    pub label_rate: BTreeMap<String, f64>,
    pub behavior: BTreeMap<String, ModelBehavior>,
    #[serde(default)]
    pub feature: BTreeMap<String, FeatureShape>,
}

fn unit(x: f64) -> bool {
    x.is_finite() && (0.0..=1.0).contains(&x)
}

impl Params {
    fn validate(&self) -> Result<(), String> {
        if self.priors.is_empty() {
            return Err("priors are empty".into());
        }
        let sum: f64 = self.priors.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("priors sum to {sum}, expected 1"));
        }
        for (c, p) in &self.priors {
            if !unit(*p) {
                return Err(format!("prior of `{c}` outside [0, 1]"));
            }
            let rate = self.label_rate.get(c).ok_or(format!("no label_rate for `{c}`"))?;
            let b = self.behavior.get(c).ok_or(format!("no behavior for `{c}`"))?;
            if !unit(*rate) || !unit(b.tpr) || !unit(b.fpr) {
                return Err(format!("probability for `{c}` outside [0, 1]"));
            }
        }
        for (c, f) in &self.feature {
            if !(f.mean.is_finite() && f.sd.is_finite() && f.sd >= 0.0) {
                return Err(format!("feature shape for `{c}` is invalid"));
            }
        }
        Ok(())
    }

    /// Overlays the given maps, category by category.
    fn overlay(&mut self, patch: &ParamPatch) {
        if let Some(p) = &patch.priors {
            self.priors = p.clone();
        }
        if let Some(r) = &patch.label_rate {
            self.label_rate.extend(r.iter().map(|(k, v)| (k.clone(), *v)));
        }
        if let Some(b) = &patch.behavior {
            self.behavior.extend(b.iter().map(|(k, v)| (k.clone(), *v)));
        }
        if let Some(f) = &patch.feature {
            self.feature.extend(f.iter().map(|(k, v)| (k.clone(), *v)));
        }
    }

    /// Expected confusion-matrix rates of one subgroup.
    pub fn expected_rates(&self, category: &str, support: u64) -> GroupRates {
        // scale probabilities onto a large integer grid, then reuse the
        // counting definitions
        const GRID: f64 = 1e12;
        let p = self.label_rate[category];
        let b = self.behavior[category];
        let cm = ConfusionMatrix::new(
            (p * b.tpr * GRID).round() as u64,
            ((1.0 - p) * b.fpr * GRID).round() as u64,
            (p * (1.0 - b.tpr) * GRID).round() as u64,
            ((1.0 - p) * (1.0 - b.fpr) * GRID).round() as u64,
        );
        GroupRates {
            support,
            ..group_rates(&cm)
        }
    }
}

/// Shape of a generated population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub model_version: String,
    pub attribute: String,
    #[serde(flatten)]
    pub params: Params,
    pub volume: usize,
    pub seed: u64,
    #[serde(default = "default_lag")]
    pub outcome_lag: usize,
    #[serde(default = "default_environment")]
    pub environment: Environment,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
    #[serde(default = "default_start")]
    pub start: DateTime<Utc>,
}

fn default_lag() -> usize {
    DEFAULT_OUTCOME_LAG
}

fn default_environment() -> Environment {
    Environment::Stable
}

fn default_prefix() -> String {
    "ev".into()
}

fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2022, 7, 18, 0, 0, 0).unwrap()
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.attribute.trim().is_empty() {
            return Err(SimError::InvalidSpec("attribute must be non-empty".into()));
        }
        self.params.validate().map_err(SimError::InvalidSpec)
    }

    fn event_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }

    /// Generates event `index` under `params`.
    pub fn event(&self, index: usize, params: &Params) -> (PredictionEvent, OutcomeEvent) {
        let mut rng = self.event_rng(index);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut category = params.priors.keys().next_back().expect("validated non-empty");
        for (c, p) in &params.priors {
            acc += p;
            if u < acc {
                category = c;
                break;
            }
        }
        let y = rng.random::<f64>() < params.label_rate[category];
        let b = params.behavior[category];
        let y_hat = rng.random::<f64>() < if y { b.tpr } else { b.fpr };
        let v: f64 = rng.random();
        let score = if y_hat { 0.5 + 0.5 * v } else { 0.5 * v };
        let shape = params.feature.get(category).copied().unwrap_or_default();
        let signal = Normal::new(shape.mean, shape.sd).expect("validated sd").sample(&mut rng);

        let timestamp = self.start + Duration::seconds(index as i64);
        let event_id = format!("{}-{index:07}", self.id_prefix);
        let prediction = PredictionEvent {
            event_id: event_id.clone(),
            timestamp,
            model_version: self.model_version.clone(),
            environment: self.environment,
            subgroup: BTreeMap::from([(self.attribute.clone(), category.clone())]),
            features: Some(BTreeMap::from([(SIGNAL_FEATURE.to_string(), FeatureValue::Number(signal))])),
            score,
            predicted_label: Label::from(y_hat),
            rollout_id: None,
        };
        let outcome = OutcomeEvent {
            event_id,
            outcome_label: Label::from(y),
            observed_at: timestamp + Duration::seconds(self.outcome_lag as i64),
        };
        (prediction, outcome)
    }

    /// Training-time label for this population.
    pub fn nutrition_label(&self, bands: &LabelBands, label_version: &str) -> NutritionLabel {
        let subgroups = self
            .params
            .priors
            .iter()
            .map(|(c, &share)| {
                let baseline = self.params.expected_rates(c, (share * self.volume as f64).round() as u64);
                let mut acceptable_band = BTreeMap::new();
                for metric in &bands.metrics {
                    if let Some(b) = baseline.get(*metric) {
                        acceptable_band.insert(
                            *metric,
                            Band((b - bands.below).max(0.0), (b + bands.above).min(1.0)),
                        );
                    }
                }
                acceptable_band.extend(bands.fixed.iter().map(|(m, b)| (*m, *b)));
                SubgroupEntry {
                    attribute: self.attribute.clone(),
                    category: c.clone(),
                    training_share: share,
                    baseline_rates: baseline,
                    acceptable_band,
                    feature_baselines: BTreeMap::new(),
                }
            })
            .collect();
        // feature baseline: a fresh sample from the training mixture
        let mut sample_spec = self.clone();
        sample_spec.seed = self.seed ^ 0x5eed_ba5e_11e5_0000;
        let sample: Vec<f64> = (0..BASELINE_SAMPLE)
            .map(|i| {
                let (e, _) = sample_spec.event(i, &self.params);
                match e.features.as_ref().and_then(|f| f.get(SIGNAL_FEATURE)) {
                    Some(FeatureValue::Number(x)) => *x,
                    _ => unreachable!("generated events carry the signal feature"),
                }
            })
            .collect();
        NutritionLabel {
            label_version: label_version.to_string(),
            model_version: self.model_version.clone(),
            subgroup_schema: vec![self.attribute.clone()],
            subgroups,
            feature_baselines: BTreeMap::from([(SIGNAL_FEATURE.to_string(), DistributionSnapshot::from_sample(sample))]),
        }
    }
}

/// How acceptable bands are derived from baseline rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelBands {
    pub metrics: Vec<RateMetric>,
    pub below: f64,
    pub above: f64,
    /// Bands applied verbatim to every subgroup, overriding derived ones.
    pub fixed: BTreeMap<RateMetric, Band>,
}

impl Default for LabelBands {
    fn default() -> Self {
        LabelBands {
            metrics: vec![RateMetric::F1, RateMetric::Tpr, RateMetric::Fpr],
            below: 0.10,
            above: 0.10,
            fixed: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    PriorShift,
    ConceptShift,
    PipelineCorruption,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_rate: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<BTreeMap<String, ModelBehavior>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<BTreeMap<String, FeatureShape>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftInjection {
    pub kind: DriftKind,
    /// First event index generated under the new parameters.
    pub onset: usize,
    #[serde(flatten)]
    pub new: ParamPatch,
}

impl DriftInjection {
    pub fn validate(&self, spec: &PopulationSpec) -> Result<(), SimError> {
        let invalid = |m: String| Err(SimError::InvalidInjection(m));
        if self.onset >= spec.volume {
            return invalid(format!("onset {} beyond stream of {} events", self.onset, spec.volume));
        }
        match self.kind {
            DriftKind::PriorShift if self.new.priors.is_none() => return invalid("prior_shift needs priors".into()),
            DriftKind::ConceptShift if self.new.label_rate.is_none() && self.new.behavior.is_none() => {
                return invalid("concept_shift needs label_rate or behavior".into())
            }
            DriftKind::PipelineCorruption if self.new.behavior.is_none() => {
                return invalid("pipeline_corruption needs behavior".into())
            }
            DriftKind::ConceptShift | DriftKind::PipelineCorruption if self.new.priors.is_some() => {
                return invalid(format!("{:?} must leave priors unchanged", self.kind))
            }
            _ => {}
        }
        let mut p = spec.params.clone();
        p.overlay(&self.new);
        p.validate().map_err(SimError::InvalidInjection)
    }
}

/// Parameters in force at each index, given a set of injections.
#[derive(Debug, Clone)]
struct Schedule {
    base: Params,
    injections: Vec<DriftInjection>,
    applied: usize,
    current: Params,
}

impl Schedule {
    fn new(base: &Params, injections: &[DriftInjection]) -> Self {
        let mut injections = injections.to_vec();
        injections.sort_by_key(|i| i.onset);
        Schedule {
            base: base.clone(),
            injections,
            applied: 0,
            current: base.clone(),
        }
    }

    fn push(&mut self, injection: DriftInjection) {
        self.injections.push(injection);
        self.injections.sort_by_key(|i| i.onset);
        self.applied = usize::MAX;
    }

    fn at(&mut self, index: usize) -> &Params {
        let applied = self.injections.iter().take_while(|i| i.onset <= index).count();
        if applied != self.applied {
            self.current = self.base.clone();
            for inj in &self.injections[..applied] {
                self.current.overlay(&inj.new);
            }
            self.applied = applied;
        }
        &self.current
    }
}

/// An ordered stream of predictions and their (lagged) outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStream {
    pub spec: PopulationSpec,
    pub injections: Vec<DriftInjection>,
    pub predictions: Vec<PredictionEvent>,
    pub outcomes: Vec<OutcomeEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StreamItem {
    Prediction(PredictionEvent),
    Outcome(OutcomeEvent),
}

impl SimStream {
    fn build(spec: PopulationSpec, injections: Vec<DriftInjection>, reuse: Option<SimStream>) -> SimStream {
        let first_changed = injections.iter().map(|i| i.onset).min().unwrap_or(spec.volume);
        let (mut predictions, mut outcomes) = match reuse {
            Some(s) => {
                let keep = first_changed.min(s.predictions.len());
                let mut p = s.predictions;
                let mut o = s.outcomes;
                p.truncate(keep);
                o.truncate(keep);
                (p, o)
            }
            None => (Vec::with_capacity(spec.volume), Vec::with_capacity(spec.volume)),
        };
        let mut schedule = Schedule::new(&spec.params, &injections);
        for i in predictions.len()..spec.volume {
            let (e, o) = spec.event(i, schedule.at(i));
            predictions.push(e);
            outcomes.push(o);
        }
        SimStream {
            spec,
            injections,
            predictions,
            outcomes,
        }
    }

    pub fn predictions_jsonl(&self) -> String {
        jsonl(&self.predictions)
    }

    pub fn outcomes_jsonl(&self) -> String {
        jsonl(&self.outcomes)
    }

    /// Predictions in order, each outcome emitted `outcome_lag` events after
    /// its prediction; any still outstanding follow at the end.
    pub fn interleaved(&self) -> Vec<StreamItem> {
        let lag = self.spec.outcome_lag;
        let mut out = Vec::with_capacity(self.predictions.len() * 2);
        for (i, p) in self.predictions.iter().enumerate() {
            out.push(StreamItem::Prediction(p.clone()));
            if i >= lag {
                out.push(StreamItem::Outcome(self.outcomes[i - lag].clone()));
            }
        }
        let released = self.predictions.len().saturating_sub(lag);
        out.extend(self.outcomes[released..].iter().cloned().map(StreamItem::Outcome));
        out
    }

    pub fn interleaved_jsonl(&self) -> String {
        jsonl(&self.interleaved())
    }

    /// Replays the interleaved stream into a fresh store.
    pub fn into_store(&self, window_size: usize) -> EventStore {
        let mut store = EventStore::new(window_size);
        for item in self.interleaved() {
            match item {
                StreamItem::Prediction(p) => {
                    store.ingest_event(p).expect("generated events are valid and unique");
                }
                StreamItem::Outcome(o) => {
                    store.join_outcome(o).expect("outcome follows its prediction");
                }
            }
        }
        store
    }
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable"));
        out.push('\n');
    }
    out
}

pub fn generate_population(spec: &PopulationSpec) -> Result<SimStream, SimError> {
    spec.validate()?;
    Ok(SimStream::build(spec.clone(), Vec::new(), None))
}

/// Regenerates the stream from `injection.onset` on; earlier events are kept
/// as they are.
pub fn inject_drift(stream: &SimStream, injection: DriftInjection) -> Result<SimStream, SimError> {
    injection.validate(&stream.spec)?;
    let mut injections = stream.injections.clone();
    injections.push(injection);
    Ok(SimStream::build(stream.spec.clone(), injections, Some(stream.clone())))
}

// ---------------------------------------------------------------------------
// scenarios

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledInjection {
    #[serde(flatten)]
    pub injection: DriftInjection,
    /// Canary runs only: replace `onset` with the index at which the rollout
    /// enters this stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_stage: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftEvaluation {
    pub window_size: usize,
    #[serde(default)]
    pub thresholds: DriftThresholds,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
}

fn default_min_count() -> usize {
    crate::metrics::DEFAULT_MIN_COUNT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanaryEvaluation {
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub gates: GateConfig,
    pub salt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlueGreenEvaluation {
    /// Behaviour overrides that turn the baseline into the green arm.
    pub green_behavior: BTreeMap<String, ModelBehavior>,
    #[serde(default)]
    pub kpi: KpiConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    /// Lowest status the subgroup-share entry must reach.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub share_status: Option<DriftStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_alert: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_alert: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triage: Option<TriageHint>,
    /// The concept check must alert within this many windows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_alert_within_windows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollout_status: Option<RolloutStatus>,
    /// Exposure must stay strictly below this fraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_fraction_below: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub name: String,
    pub version: u32,
    pub description: String,
    pub baseline: PopulationSpec,
    #[serde(default)]
    pub injections: Vec<ScheduledInjection>,
    #[serde(default)]
    pub bands: LabelBands,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftEvaluation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canary: Option<CanaryEvaluation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blue_green: Option<BlueGreenEvaluation>,
    #[serde(default)]
    pub expected: Expectations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftOutcome {
    pub windows_evaluated: usize,
    /// PSI of subgroup shares in the final window, per attribute.
    pub share_psi: BTreeMap<String, f64>,
    /// Index of the first window whose concept check alerted.
    pub first_concept_alert_window: Option<usize>,
    pub report: DriftReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryOutcome {
    pub status: RolloutStatus,
    pub final_stage: usize,
    pub max_fraction: f64,
    pub events_generated: usize,
    pub log: Vec<Transition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationCheck {
    pub name: String,
    pub expected: String,
    pub observed: String,
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub version: u32,
    pub seed: u64,
    pub label: NutritionLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canary: Option<CanaryOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blue_green: Option<ComparisonReport>,
    pub expectations: Vec<ExpectationCheck>,
    pub all_held: bool,
}

impl ScenarioScript {
    pub fn validate(&self) -> Result<(), SimError> {
        self.baseline.validate()?;
        for s in &self.injections {
            if s.at_stage.is_some() {
                if self.canary.is_none() {
                    return Err(SimError::InvalidInjection("at_stage needs a canary evaluation".into()));
                }
                // onset is resolved at run time; check parameters only
                let mut probe = s.injection.clone();
                probe.onset = 0;
                probe.validate(&self.baseline)?;
            } else {
                s.injection.validate(&self.baseline)?;
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.baseline.seed = seed;
        self
    }

    pub fn label(&self) -> NutritionLabel {
        self.baseline.nutrition_label(&self.bands, &format!("{}-v{}", self.name, self.version))
    }
}

fn run_drift(script: &ScenarioScript, eval: &DriftEvaluation, label: &NutritionLabel) -> Result<DriftOutcome, SimError> {
    let mut stream = generate_population(&script.baseline)?;
    for s in &script.injections {
        stream = inject_drift(&stream, s.injection.clone())?;
    }
    let store = stream.into_store(eval.window_size);
    let windows = tumbling_windows(store.records(), WindowSpec::Count { size: eval.window_size });
    let mut first_concept_alert_window = None;
    let mut last = None;
    for (i, w) in windows.iter().enumerate() {
        let report = drift_report(label, w, &eval.thresholds, eval.min_count);
        if first_concept_alert_window.is_none() && report.concept_alert() {
            first_concept_alert_window = Some(i);
        }
        last = Some(report);
    }
    let report = last.ok_or_else(|| SimError::InvalidSpec("scenario produced no events".into()))?;
    let share_psi = report
        .data
        .iter()
        .filter(|e| e.scope == crate::drift::DriftScope::SubgroupShare)
        .filter_map(|e| e.value.map(|v| (e.name.clone(), v)))
        .collect();
    Ok(DriftOutcome {
        windows_evaluated: windows.len(),
        share_psi,
        first_concept_alert_window,
        report,
    })
}

/// Drives a canary rollout over a generated stream.
///
/// Each event is hashed into the canary or stable cohort within its stratum.
/// Canary events join the current stage's window once their outcome arrives;
/// the gate is evaluated when the window reaches the stage's `min_events` and
/// re-evaluated every quarter of that while it holds.
fn run_canary(script: &ScenarioScript, eval: &CanaryEvaluation, label: &NutritionLabel) -> Result<CanaryOutcome, SimError> {
    let spec = &script.baseline;
    let attributes = vec![spec.attribute.clone()];
    let mut state = plan_canary(CanaryPlan {
        rollout_id: format!("{}-rollout", script.name),
        model_version: spec.model_version.clone(),
        stages: eval.stages.clone(),
        gates: eval.gates.clone(),
        cohort_attributes: attributes.clone(),
    })
    .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    state.start(spec.start).expect("fresh plan starts");

    let mut schedule = Schedule::new(
        &spec.params,
        &script
            .injections
            .iter()
            .filter(|s| s.at_stage.is_none())
            .map(|s| s.injection.clone())
            .collect::<Vec<_>>(),
    );
    let activate = |stage: usize, at: usize, schedule: &mut Schedule| {
        for s in script.injections.iter().filter(|s| s.at_stage == Some(stage)) {
            let mut inj = s.injection.clone();
            inj.onset = at;
            schedule.push(inj);
        }
    };
    activate(0, 0, &mut schedule);

    let mut pending: VecDeque<(usize, usize, JoinedRecord)> = VecDeque::new();
    let mut stage_records: Vec<JoinedRecord> = Vec::new();
    let mut next_eval = state.stage().min_events.max(1);
    let mut generated = 0;

    for i in 0..spec.volume {
        if state.status != RolloutStatus::Running {
            break;
        }
        generated = i + 1;
        let (mut prediction, outcome) = spec.event(i, schedule.at(i));
        let now = prediction.timestamp;
        let stratum = stratum_key(&prediction.subgroup, &attributes);
        if state.assign_cohort(&prediction.event_id, &stratum, &eval.salt).expect("running") == Cohort::Canary {
            prediction.environment = Environment::Canary;
            prediction.rollout_id = Some(state.plan.rollout_id.clone());
            let mut record = JoinedRecord::pending(prediction);
            record.outcome_label = Some(outcome.outcome_label);
            record.observed_at = Some(outcome.observed_at);
            pending.push_back((i + spec.outcome_lag, state.current_stage, record));
        }
        while pending.front().is_some_and(|(arrives, _, _)| *arrives <= i) {
            let (_, stage, record) = pending.pop_front().expect("non-empty");
            if stage == state.current_stage {
                stage_records.push(record);
            }
        }
        if stage_records.len() < next_eval {
            continue;
        }
        let elapsed = (now - state.stage_started_at.expect("running")).num_seconds();
        let metrics = StageMetrics::from_records(&stage_records, &attributes, label, eval.gates.min_count, elapsed);
        let gate = evaluate_gate(&state, &metrics, label);
        let kind = state.advance(gate, now).expect("running").kind;
        match kind {
            TransitionKind::Promote => {
                stage_records.clear();
                next_eval = state.stage().min_events.max(1);
                activate(state.current_stage, i + 1, &mut schedule);
            }
            TransitionKind::Hold => next_eval = stage_records.len() + (state.stage().min_events / 4).max(1),
            _ => {}
        }
    }
    Ok(CanaryOutcome {
        status: state.status,
        final_stage: state.current_stage,
        max_fraction: state.max_fraction_reached(),
        events_generated: generated,
        log: state.log,
    })
}

fn run_blue_green(script: &ScenarioScript, eval: &BlueGreenEvaluation, label: &NutritionLabel) -> Result<ComparisonReport, SimError> {
    let mut blue_spec = script.baseline.clone();
    blue_spec.environment = Environment::Blue;
    blue_spec.id_prefix = "blue".into();
    let mut green_spec = blue_spec.clone();
    green_spec.environment = Environment::Green;
    green_spec.id_prefix = "green".into();
    green_spec.seed = blue_spec.seed.wrapping_add(1);
    green_spec.params.behavior.extend(eval.green_behavior.iter().map(|(k, v)| (k.clone(), *v)));
    let mut kpi = eval.kpi.clone();
    if kpi.attribute.is_empty() {
        kpi.attribute = blue_spec.attribute.clone();
    }
    let arm = |spec: &PopulationSpec, name: &str| -> Result<ArmMetrics, SimError> {
        let store = generate_population(spec)?.into_store(spec.volume.max(1));
        ArmMetrics::compute(
            ArmTag {
                name: name.into(),
                kind: ArmKind::Model,
            },
            store.records(),
            label,
            &kpi,
        )
        .map_err(|e| SimError::InvalidSpec(e.to_string()))
    };
    let blue = arm(&blue_spec, "blue")?;
    let green = arm(&green_spec, "green")?;
    Ok(compare_arms(&blue, &green, label, &kpi))
}

fn check(name: &str, expected: impl ToString, observed: impl ToString, held: bool) -> ExpectationCheck {
    ExpectationCheck {
        name: name.into(),
        expected: expected.to_string(),
        observed: observed.to_string(),
        held,
    }
}

fn json_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => "?".into(),
    }
}

/// Generates, ingests and evaluates a scenario, then checks its expectations.
pub fn run_scenario(script: &ScenarioScript) -> Result<ScenarioReport, SimError> {
    script.validate()?;
    let label = script.label();
    let drift = script.drift.as_ref().map(|e| run_drift(script, e, &label)).transpose()?;
    let canary = script.canary.as_ref().map(|e| run_canary(script, e, &label)).transpose()?;
    let blue_green = script.blue_green.as_ref().map(|e| run_blue_green(script, e, &label)).transpose()?;

    let exp = &script.expected;
    let mut checks = Vec::new();
    let missing = |name: &str| check(name, "evaluated", "not evaluated", false);
    if let Some(want) = exp.share_status {
        match drift.as_ref().and_then(|d| d.report.share_entry(&script.baseline.attribute)) {
            Some(e) => {
                let held = match want {
                    DriftStatus::Watch => e.status == DriftStatus::Watch,
                    other => e.status == other,
                };
                checks.push(check("share_status", json_name(&want), json_name(&e.status), held));
            }
            None => checks.push(missing("share_status")),
        }
    }
    if let Some(want) = exp.data_alert {
        match &drift {
            Some(d) => {
                let got = d.report.data.iter().any(|e| e.status == DriftStatus::Alert);
                checks.push(check("data_alert", want, got, want == got));
            }
            None => checks.push(missing("data_alert")),
        }
    }
    if let Some(want) = exp.concept_alert {
        match &drift {
            Some(d) => {
                let got = d.report.concept_alert();
                checks.push(check("concept_alert", want, got, want == got));
            }
            None => checks.push(missing("concept_alert")),
        }
    }
    if let Some(want) = exp.triage {
        match &drift {
            Some(d) => checks.push(check(
                "triage",
                json_name(&want),
                json_name(&d.report.triage_hint),
                d.report.triage_hint == want,
            )),
            None => checks.push(missing("triage")),
        }
    }
    if let Some(n) = exp.concept_alert_within_windows {
        match &drift {
            Some(d) => {
                let got = d.first_concept_alert_window.map(|w| w + 1);
                checks.push(check(
                    "concept_alert_within_windows",
                    n,
                    got.map_or("never".to_string(), |w| w.to_string()),
                    got.is_some_and(|w| w <= n),
                ));
            }
            None => checks.push(missing("concept_alert_within_windows")),
        }
    }
    if let Some(want) = exp.rollout_status {
        match &canary {
            Some(c) => checks.push(check("rollout_status", json_name(&want), json_name(&c.status), c.status == want)),
            None => checks.push(missing("rollout_status")),
        }
    }
    if let Some(limit) = exp.max_fraction_below {
        match &canary {
            Some(c) => checks.push(check("max_fraction_below", limit, c.max_fraction, c.max_fraction < limit)),
            None => checks.push(missing("max_fraction_below")),
        }
    }
    if let Some(want) = exp.decision {
        match &blue_green {
            Some(r) => checks.push(check("decision", json_name(&want), json_name(&r.decision), r.decision == want)),
            None => checks.push(missing("decision")),
        }
    }
    let all_held = checks.iter().all(|c| c.held);
    Ok(ScenarioReport {
        name: script.name.clone(),
        version: script.version,
        seed: script.baseline.seed,
        label,
        drift,
        canary,
        blue_green,
        expectations: checks,
        all_held,
    })
}

// ---------------------------------------------------------------------------
// built-in scenarios (parameters are illustrative)

fn two_groups<T: Copy>(a: &str, va: T, b: &str, vb: T) -> BTreeMap<String, T> {
    BTreeMap::from([(a.to_string(), va), (b.to_string(), vb)])
}

fn behavior(tpr: f64, fpr: f64) -> ModelBehavior {
    ModelBehavior { tpr, fpr }
}

fn spec(
    model_version: &str,
    attribute: &str,
    groups: (&str, &str),
    priors: (f64, f64),
    label_rate: (f64, f64),
    behaviors: (ModelBehavior, ModelBehavior),
    volume: usize,
) -> PopulationSpec {
    let (a, b) = groups;
    PopulationSpec {
        model_version: model_version.into(),
        attribute: attribute.into(),
        params: Params {
            priors: two_groups(a, priors.0, b, priors.1),
            label_rate: two_groups(a, label_rate.0, b, label_rate.1),
            behavior: two_groups(a, behaviors.0, b, behaviors.1),
            feature: two_groups(a, FeatureShape { mean: 0.0, sd: 1.0 }, b, FeatureShape { mean: 1.0, sd: 1.0 }),
        },
        volume,
        seed: 7,
        outcome_lag: DEFAULT_OUTCOME_LAG,
        environment: Environment::Stable,
        id_prefix: "ev".into(),
        start: default_start(),
    }
}

fn default_canary() -> CanaryEvaluation {
    CanaryEvaluation {
        stages: crate::rollout::default_stages(60, 3000),
        gates: GateConfig::default(),
        salt: "canary-salt".into(),
    }
}

pub const BUILTIN_SCENARIOS: [&str; 6] = ["vaccine", "pipeline", "tay", "null", "gender_shades", "blue_green"];

/// A registered scenario by name.
pub fn builtin(name: &str) -> Result<ScenarioScript, SimError> {
    let script = match name {
        "vaccine" => {
            let baseline = spec(
                "vaccine-m1",
                "comorbidity",
                ("a", "b"),
                (0.95, 0.05),
                (0.4, 0.6),
                (behavior(0.9, 0.1), behavior(0.88, 0.12)),
                40_000,
            );
            ScenarioScript {
                name: name.into(),
                version: 1,
                description: "Campaign shifts who arrives (95/5 -> 89/11) and how outcomes relate to inputs for the comorbidity group".into(),
                injections: vec![
                    ScheduledInjection {
                        injection: DriftInjection {
                            kind: DriftKind::PriorShift,
                            onset: 20_000,
                            new: ParamPatch {
                                priors: Some(two_groups("a", 0.89, "b", 0.11)),
                                ..ParamPatch::default()
                            },
                        },
                        at_stage: None,
                    },
                    ScheduledInjection {
                        injection: DriftInjection {
                            kind: DriftKind::ConceptShift,
                            onset: 20_000,
                            new: ParamPatch {
                                label_rate: Some(BTreeMap::from([("b".to_string(), 0.3)])),
                                behavior: Some(BTreeMap::from([("b".to_string(), behavior(0.55, 0.12))])),
                                ..ParamPatch::default()
                            },
                        },
                        at_stage: None,
                    },
                ],
                baseline,
                bands: LabelBands::default(),
                drift: Some(DriftEvaluation {
                    window_size: 20_000,
                    thresholds: DriftThresholds::default(),
                    min_count: default_min_count(),
                }),
                canary: None,
                blue_green: None,
                expected: Expectations {
                    share_status: Some(DriftStatus::Watch),
                    data_alert: Some(false),
                    concept_alert: Some(true),
                    triage: Some(TriageHint::ExternalVariableCaptureSuspected),
                    ..Expectations::default()
                },
            }
        }
        "pipeline" => {
            let baseline = spec(
                "pipeline-m1",
                "group",
                ("a", "b"),
                (0.95, 0.05),
                (0.5, 0.5),
                (behavior(0.9, 0.1), behavior(0.88, 0.12)),
                40_000,
            );
            ScenarioScript {
                name: name.into(),
                version: 1,
                description: "A broken upstream join degrades predictions while inputs keep their training distribution".into(),
                injections: vec![ScheduledInjection {
                    injection: DriftInjection {
                        kind: DriftKind::PipelineCorruption,
                        onset: 20_000,
                        new: ParamPatch {
                            behavior: Some(two_groups("a", behavior(0.7, 0.3), "b", behavior(0.7, 0.3))),
                            ..ParamPatch::default()
                        },
                    },
                    at_stage: None,
                }],
                baseline,
                bands: LabelBands {
                    metrics: vec![RateMetric::F1],
                    below: crate::hitl::DEFAULT_CUTOFF_DELTA,
                    above: 1.0,
                    fixed: BTreeMap::new(),
                },
                drift: Some(DriftEvaluation {
                    window_size: 20_000,
                    thresholds: DriftThresholds::default(),
                    min_count: default_min_count(),
                }),
                canary: None,
                blue_green: None,
                expected: Expectations {
                    share_status: Some(DriftStatus::None),
                    concept_alert: Some(true),
                    triage: Some(TriageHint::InternalDataLeakageSuspected),
                    ..Expectations::default()
                },
            }
        }
        "tay" | "null" => {
            let baseline = spec(
                &format!("{name}-m2"),
                "community",
                ("a", "b"),
                (0.7, 0.3),
                (0.4, 0.4),
                (behavior(0.85, 0.1), behavior(0.85, 0.1)),
                200_000,
            );
            let tay = name == "tay";
            ScenarioScript {
                name: name.into(),
                version: 1,
                description: if tay {
                    "Environment rewards the model for mistreating community b once exposure widens; the shift starts with stage 1".into()
                } else {
                    "No injections: detectors stay quiet and the canary completes".into()
                },
                injections: if tay {
                    vec![ScheduledInjection {
                        injection: DriftInjection {
                            kind: DriftKind::ConceptShift,
                            onset: 0,
                            new: ParamPatch {
                                behavior: Some(BTreeMap::from([("b".to_string(), behavior(0.45, 0.4))])),
                                ..ParamPatch::default()
                            },
                        },
                        at_stage: Some(1),
                    }]
                } else {
                    Vec::new()
                },
                baseline,
                bands: LabelBands::default(),
                drift: if tay {
                    None
                } else {
                    Some(DriftEvaluation {
                        window_size: 10_000,
                        thresholds: DriftThresholds::default(),
                        min_count: default_min_count(),
                    })
                },
                canary: Some(default_canary()),
                blue_green: None,
                expected: if tay {
                    Expectations {
                        rollout_status: Some(RolloutStatus::RolledBack),
                        max_fraction_below: Some(0.5),
                        ..Expectations::default()
                    }
                } else {
                    Expectations {
                        share_status: Some(DriftStatus::None),
                        data_alert: Some(false),
                        concept_alert: Some(false),
                        rollout_status: Some(RolloutStatus::Completed),
                        ..Expectations::default()
                    }
                },
            }
        }
        "gender_shades" => {
            // error rate 0.08 vs 0.347 with balanced labels
            let baseline = spec(
                "faces-m1",
                "skin_gender",
                ("darker_female", "lighter_male"),
                (0.5, 0.5),
                (0.5, 0.5),
                (behavior(0.653, 0.347), behavior(0.92, 0.08)),
                4_000,
            );
            ScenarioScript {
                name: name.into(),
                version: 1,
                description: "Label records subgroup error rates of 8% and 34.7% against a common acceptable error band".into(),
                injections: Vec::new(),
                baseline,
                bands: LabelBands {
                    metrics: Vec::new(),
                    below: 0.0,
                    above: 0.0,
                    fixed: BTreeMap::from([(RateMetric::ErrorRate, Band(0.0, 0.15))]),
                },
                drift: Some(DriftEvaluation {
                    window_size: 1_000,
                    thresholds: DriftThresholds::default(),
                    min_count: default_min_count(),
                }),
                canary: None,
                blue_green: None,
                expected: Expectations {
                    concept_alert_within_windows: Some(2),
                    ..Expectations::default()
                },
            }
        }
        "blue_green" => {
            // blue: tpr gap 0.05; green: tpr gap 0.30
            let baseline = spec(
                "bg-m1",
                "group",
                ("a", "b"),
                (0.6, 0.4),
                (0.5, 0.5),
                (behavior(0.85, 0.1), behavior(0.80, 0.1)),
                6_000,
            );
            ScenarioScript {
                name: name.into(),
                version: 1,
                description: "Champion (blue) with a small equalized-odds gap against a challenger (green) with a large one".into(),
                injections: Vec::new(),
                baseline,
                bands: LabelBands::default(),
                drift: None,
                canary: None,
                blue_green: Some(BlueGreenEvaluation {
                    green_behavior: BTreeMap::from([("b".to_string(), behavior(0.55, 0.1))]),
                    kpi: KpiConfig::default(),
                }),
                expected: Expectations {
                    decision: Some(Decision::KeepBlue),
                    ..Expectations::default()
                },
            }
        }
        other => return Err(SimError::UnknownScenario(other.to_string())),
    };
    Ok(script)
}

pub fn run_named(name: &str, seed: Option<u64>) -> Result<ScenarioReport, SimError> {
    let mut script = builtin(name)?;
    if let Some(seed) = seed {
        script = script.with_seed(seed);
    }
    run_scenario(&script)
}
