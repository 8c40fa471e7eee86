#![allow(dead_code)]

use std::collections::BTreeMap;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use chrono::{DateTime, Duration, TimeZone, Utc};
use fairgate_core::metrics::{group_rates, ConfusionMatrix, RateMetric};
use fairgate_core::model::{Band, Environment, Label, NutritionLabel, OutcomeEvent, PredictionEvent, SubgroupEntry};
use fairgate_gateway::config::ServiceConfig;
use fairgate_gateway::http::{router, AppState};
use fairgate_gateway::service::Service;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const ATTR: &str = "group";
pub const MV: &str = "m1";

/// `(tp, fp, fn, tn)`.
pub type Counts = (usize, usize, usize, usize);

/// The two-group parity fixture: gaps of 0.15, 0.30 and 0.30.
pub const PARITY_A: Counts = (40, 5, 10, 45);
pub const PARITY_B: Counts = (20, 10, 20, 50);

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

/// Prediction and outcome JSON lines for per-group confusion counts.
#[derive(Debug, Clone)]
pub struct Batch {
    pub model_version: String,
    pub environment: Environment,
    pub rollout_id: Option<String>,
    pub prefix: String,
    pub start: DateTime<Utc>,
    pub groups: Vec<(String, Counts)>,
}

impl Batch {
    pub fn new(groups: &[(&str, Counts)]) -> Self {
        Batch {
            model_version: MV.into(),
            environment: Environment::Stable,
            rollout_id: None,
            prefix: "e".into(),
            start: t0(),
            groups: groups.iter().map(|(g, c)| (g.to_string(), *c)).collect(),
        }
    }

    pub fn canary(mut self, rollout_id: &str, prefix: &str, start: DateTime<Utc>) -> Self {
        self.environment = Environment::Canary;
        self.rollout_id = Some(rollout_id.into());
        self.prefix = prefix.into();
        self.start = start;
        self
    }

    pub fn pairs(&self) -> Vec<(PredictionEvent, OutcomeEvent)> {
        let mut out = Vec::new();
        for (group, (tp, fp, fn_, tn)) in &self.groups {
            let cells = [(*tp, true, true), (*fp, true, false), (*fn_, false, true), (*tn, false, false)];
            for (n, y_hat, y) in cells {
                for _ in 0..n {
                    let i = out.len();
                    let ts = self.start + Duration::seconds(i as i64);
                    let event = PredictionEvent {
                        event_id: format!("{}{i:06}", self.prefix),
                        timestamp: ts,
                        model_version: self.model_version.clone(),
                        environment: self.environment,
                        subgroup: BTreeMap::from([(ATTR.to_string(), group.clone())]),
                        features: None,
                        score: if y_hat { 0.9 } else { 0.1 },
                        predicted_label: Label::from(y_hat),
                        rollout_id: self.rollout_id.clone(),
                    };
                    let outcome = OutcomeEvent {
                        event_id: event.event_id.clone(),
                        outcome_label: Label::from(y),
                        observed_at: ts + Duration::seconds(60),
                    };
                    out.push((event, outcome));
                }
            }
        }
        out
    }

    pub fn events(&self) -> String {
        self.pairs()
            .iter()
            .map(|(e, _)| serde_json::to_string(e).unwrap() + "\n")
            .collect()
    }

    pub fn outcomes(&self) -> String {
        self.pairs()
            .iter()
            .map(|(_, o)| serde_json::to_string(o).unwrap() + "\n")
            .collect()
    }
}

/// Label whose baselines are the given counts, with ±`half_width` bands on
/// TPR, FPR and F1. Training shares are proportional to the counts.
pub fn label_for(groups: &[(&str, Counts)], half_width: f64) -> NutritionLabel {
    let total: usize = groups.iter().map(|(_, (a, b, c, d))| a + b + c + d).sum();
    let subgroups = groups
        .iter()
        .map(|(g, (tp, fp, fn_, tn))| {
            let rates = group_rates(&ConfusionMatrix::new(*tp as u64, *fp as u64, *fn_ as u64, *tn as u64));
            let acceptable_band = [RateMetric::Tpr, RateMetric::Fpr, RateMetric::F1]
                .iter()
                .filter_map(|m| rates.get(*m).map(|b| (*m, Band((b - half_width).max(0.0), (b + half_width).min(1.0)))))
                .collect();
            SubgroupEntry {
                attribute: ATTR.into(),
                category: g.to_string(),
                training_share: (tp + fp + fn_ + tn) as f64 / total as f64,
                baseline_rates: rates,
                acceptable_band,
                feature_baselines: BTreeMap::new(),
            }
        })
        .collect();
    NutritionLabel {
        label_version: "l1".into(),
        model_version: MV.into(),
        subgroup_schema: vec![ATTR.into()],
        subgroups,
        feature_baselines: BTreeMap::new(),
    }
}

pub fn parity_label() -> NutritionLabel {
    label_for(&[("a", PARITY_A), ("b", PARITY_B)], 0.2)
}

pub fn label_json(label: &NutritionLabel) -> String {
    serde_json::to_string(label).unwrap()
}

pub fn app(service: Service) -> Router {
    router(AppState::new(service))
}

pub fn ephemeral_app() -> Router {
    app(Service::ephemeral(ServiceConfig::default()))
}

pub struct Reply {
    pub status: StatusCode,
    pub text: String,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.text).unwrap_or_else(|e| panic!("not JSON ({e}): {}", self.text))
    }
}

pub async fn send_with(app: &Router, method: &str, uri: &str, body: Option<&str>, token: Option<&str>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = req.body(Body::from(body.unwrap_or("").to_string())).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    Reply {
        status,
        text: String::from_utf8(bytes.to_vec()).unwrap(),
    }
}

pub async fn send(app: &Router, method: &str, uri: &str, body: Option<&str>) -> Reply {
    send_with(app, method, uri, body, None).await
}

/// App preloaded with the parity fixture.
pub async fn parity_app() -> Router {
    let app = ephemeral_app();
    let batch = Batch::new(&[("a", PARITY_A), ("b", PARITY_B)]);
    let r = send(&app, "PUT", &format!("/v1/labels/{MV}"), Some(&label_json(&parity_label()))).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text);
    let r = send(&app, "POST", "/v1/events", Some(&batch.events())).await;
    assert_eq!(r.json()["accepted"], 200, "{}", r.text);
    let r = send(&app, "POST", "/v1/outcomes", Some(&batch.outcomes())).await;
    assert_eq!(r.json()["accepted"], 200, "{}", r.text);
    app
}

pub fn gap(pair: &Value, key: &str) -> f64 {
    pair[key]["value"].as_f64().unwrap_or_else(|| panic!("no value for {key}: {pair}"))
}
