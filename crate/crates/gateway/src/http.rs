//! The `/v1` HTTP API.
//!
//! Handlers parse their own bodies so that malformed input gets the same
//! `{"code", "message"}` envelope as every other error.

use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use fairgate_core::hitl::ExportFilter;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::error::{ApiError, GatewayError};
use crate::service::{self, Service};

pub struct AppState {
    service: Mutex<Service>,
    ingest_permits: Semaphore,
    bearer_token: Option<String>,
}

impl AppState {
    pub fn new(service: Service) -> Self {
        let permits = service.config().max_inflight_ingest.max(1);
        let bearer_token = service.config().bearer_token.clone();
        AppState {
            service: Mutex::new(service),
            ingest_permits: Semaphore::new(permits),
            bearer_token,
        }
    }

    fn service(&self) -> MutexGuard<'_, Service> {
        // a panic inside a handler cannot leave the service half-mutated:
        // mutations are applied only after persistence succeeds
        self.service.lock().unwrap_or_else(|p| p.into_inner())
    }
}

type Shared = State<Arc<AppState>>;
type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse_error(message: impl Into<String>) -> ApiError {
    ApiError {
        status: 400,
        code: "ParseError".into(),
        message: message.into(),
    }
}

fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| parse_error(e.to_string()))
}

/// Like `body`, but an empty body means the type's default.
fn body_or_default<T: DeserializeOwned + Default>(bytes: &Bytes) -> Result<T, ApiError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        Ok(T::default())
    } else {
        body(bytes)
    }
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> Result<T, ApiError> {
    q.map(|Query(v)| v).map_err(|e| parse_error(e.body_text()))
}

fn text(bytes: &Bytes) -> Result<&str, ApiError> {
    std::str::from_utf8(bytes).map_err(|e| parse_error(format!("body is not UTF-8: {e}")))
}

fn ok<T: Serialize>(v: T) -> ApiResult<T> {
    Ok(Json(v))
}

pub fn router(state: AppState) -> Router {
    let cors = cors_layer(&state.service().config().cors_allowlist);
    let state = Arc::new(state);
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/events", post(ingest_events))
        .route("/v1/outcomes", post(ingest_outcomes))
        .route("/v1/labels/{model_version}", put(put_label).get(get_label))
        .route("/v1/metrics/stratified", get(stratified))
        .route("/v1/parity", get(parity))
        .route("/v1/drift", get(drift))
        .route("/v1/rollouts", post(create_rollout).get(list_rollouts))
        .route("/v1/rollouts/{id}", get(get_rollout))
        .route("/v1/rollouts/{id}/advance", post(advance_rollout))
        .route("/v1/rollouts/{id}/abort", post(abort_rollout))
        .route("/v1/rollouts/{id}/assign", post(assign))
        .route("/v1/comparisons", post(create_comparison))
        .route("/v1/comparisons/{id}", get(get_comparison))
        .route("/v1/review/queue", get(review_queue))
        .route("/v1/review/flag", post(flag))
        .route("/v1/review/export", get(export))
        .route("/v1/review/{id}/decision", post(decide))
        .route("/v1/rebalance", post(rebalance))
        .route("/v1/simulate", post(simulate))
        .fallback(not_found)
        .layer(middleware::from_fn_with_state(state.clone(), authorize))
        .layer(cors)
        .with_state(state)
}

fn cors_layer(allowlist: &[String]) -> CorsLayer {
    let origins: Vec<HeaderValue> = allowlist.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
    CorsLayer::new()
        .allow_origin(AllowOrigin::list(origins))
        .allow_methods([Method::GET, Method::POST, Method::PUT])
        .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION])
}

async fn authorize(State(state): Shared, request: Request, next: Next) -> Response {
    let Some(token) = &state.bearer_token else {
        return next.run(request).await;
    };
    if request.uri().path() == "/v1/health" || request.method() == Method::OPTIONS {
        return next.run(request).await;
    }
    let presented = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(token.as_str()) {
        next.run(request).await
    } else {
        ApiError::from(GatewayError::Unauthorized).into_response()
    }
}

async fn not_found(request: Request) -> ApiError {
    GatewayError::NotFound(format!("route {} {}", request.method(), request.uri().path())).into()
}

async fn health() -> Json<service::Health> {
    Json(service::health())
}

fn overloaded() -> ApiError {
    GatewayError::Overloaded.into()
}

async fn ingest_events(State(s): Shared, bytes: Bytes) -> ApiResult<service::IngestResponse> {
    let _permit = s.ingest_permits.try_acquire().map_err(|_| overloaded())?;
    let text = text(&bytes)?;
    ok(s.service().ingest_events(text)?)
}

async fn ingest_outcomes(State(s): Shared, bytes: Bytes) -> ApiResult<service::IngestResponse> {
    let _permit = s.ingest_permits.try_acquire().map_err(|_| overloaded())?;
    let text = text(&bytes)?;
    ok(s.service().ingest_outcomes(text)?)
}

async fn put_label(State(s): Shared, Path(mv): Path<String>, bytes: Bytes) -> ApiResult<service::LabelResponse> {
    let text = text(&bytes)?;
    ok(s.service().put_label(&mv, text)?)
}

async fn get_label(State(s): Shared, Path(mv): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(s.service().label(&mv)?.clone()).into_response())
}

async fn stratified(
    State(s): Shared,
    q: Result<Query<service::WindowQuery>, QueryRejection>,
) -> ApiResult<service::StratifiedResponse> {
    ok(s.service().stratified(&query(q)?)?)
}

async fn parity(
    State(s): Shared,
    q: Result<Query<service::WindowQuery>, QueryRejection>,
) -> ApiResult<fairgate_core::metrics::ParityReport> {
    ok(s.service().parity(&query(q)?)?)
}

async fn drift(
    State(s): Shared,
    q: Result<Query<service::WindowQuery>, QueryRejection>,
) -> ApiResult<fairgate_core::drift::DriftReport> {
    ok(s.service().drift(&query(q)?)?)
}

async fn create_rollout(State(s): Shared, bytes: Bytes) -> Result<(StatusCode, Json<service::RolloutView>), ApiError> {
    let view = s.service().create_rollout(body(&bytes)?)?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn list_rollouts(State(s): Shared) -> ApiResult<Vec<service::RolloutSummary>> {
    ok(s.service().list_rollouts())
}

async fn get_rollout(State(s): Shared, Path(id): Path<String>) -> ApiResult<service::RolloutView> {
    ok(s.service().rollout(&id)?)
}

async fn advance_rollout(
    State(s): Shared,
    Path(id): Path<String>,
    bytes: Bytes,
) -> ApiResult<service::TransitionResponse> {
    let req = body_or_default(&bytes)?;
    ok(s.service().advance_rollout(&id, req)?)
}

async fn abort_rollout(
    State(s): Shared,
    Path(id): Path<String>,
    bytes: Bytes,
) -> ApiResult<service::TransitionResponse> {
    let req = body_or_default(&bytes)?;
    ok(s.service().abort_rollout(&id, req)?)
}

async fn assign(State(s): Shared, Path(id): Path<String>, bytes: Bytes) -> ApiResult<service::AssignResponse> {
    let req: service::AssignRequest = body(&bytes)?;
    ok(s.service().assign(&id, &req)?)
}

async fn create_comparison(
    State(s): Shared,
    bytes: Bytes,
) -> Result<(StatusCode, Json<fairgate_core::rollout::BlueGreenComparison>), ApiError> {
    let c = s.service().create_comparison(body(&bytes)?)?;
    Ok((StatusCode::CREATED, Json(c)))
}

async fn get_comparison(
    State(s): Shared,
    Path(id): Path<String>,
) -> ApiResult<fairgate_core::rollout::BlueGreenComparison> {
    ok(s.service().comparison(&id)?)
}

async fn review_queue(
    State(s): Shared,
    q: Result<Query<service::QueueQuery>, QueryRejection>,
) -> ApiResult<service::QueueResponse> {
    ok(s.service().review_queue(&query(q)?))
}

async fn flag(State(s): Shared, bytes: Bytes) -> ApiResult<service::FlagResponse> {
    ok(s.service().flag(body(&bytes)?)?)
}

async fn decide(State(s): Shared, Path(id): Path<String>, bytes: Bytes) -> ApiResult<service::DecisionResponse> {
    ok(s.service().decide(&id, body(&bytes)?)?)
}

async fn export(State(s): Shared, q: Result<Query<ExportFilter>, QueryRejection>) -> Result<Response, ApiError> {
    let document = s.service().export(&query(q)?);
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], document).into_response())
}

async fn rebalance(bytes: Bytes) -> ApiResult<fairgate_core::rebalance::RebalanceOutcome> {
    let req = body(&bytes)?;
    let out = tokio::task::spawn_blocking(move || service::rebalance(req))
        .await
        .map_err(|e| ApiError::from(GatewayError::Internal(e.to_string())))??;
    ok(out)
}

async fn simulate(bytes: Bytes) -> ApiResult<fairgate_core::simulator::ScenarioReport> {
    let req = body(&bytes)?;
    let out = tokio::task::spawn_blocking(move || service::simulate(req))
        .await
        .map_err(|e| ApiError::from(GatewayError::Internal(e.to_string())))??;
    ok(out)
}

/// Binds and serves until ctrl-c.
pub async fn serve(service: Service) -> Result<(), GatewayError> {
    let listen = service.config().listen.clone();
    let app = router(AppState::new(service));
    let listener = tokio::net::TcpListener::bind(&listen).await.map_err(|e| GatewayError::Bind {
        addr: listen.clone(),
        reason: e.to_string(),
    })?;
    tracing::info!(addr = %listen, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| GatewayError::io("serving", e))
}
