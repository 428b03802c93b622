use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use crate::engine::{Candidate, FoundSummary, Health, RetrainSummary, Service, SessionInfo, Started, Stepped};
use crate::error::ServiceError;

type ApiResult<T> = Result<Json<T>, ServiceError>;

#[derive(Debug, Default, Deserialize)]
struct CreateRequest {
    client_tag: Option<String>,
}

#[derive(Debug, Deserialize)]
struct AnswerRequest {
    query_id: u64,
    chosen: usize,
}

#[derive(Debug, Deserialize)]
struct FoundRequest {
    target: usize,
}

#[derive(Debug, serde::Serialize)]
struct FoundResponse {
    summary: FoundSummary,
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("malformed body: {e}")))
}

fn parse_id<T: std::str::FromStr>(raw: &str) -> Result<T, ServiceError> {
    raw.parse().map_err(|_| ServiceError::BadRequest(format!("`{raw}` is not an id")))
}

/// Runs blocking engine work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn create_session(State(svc): State<Arc<Service>>, body: Bytes) -> ApiResult<Started> {
    let req: CreateRequest = if body.iter().all(u8::is_ascii_whitespace) { CreateRequest::default() } else { parse(&body)? };
    blocking(move || svc.create_session(req.client_tag)).await.map(Json)
}

async fn list_sessions(State(svc): State<Arc<Service>>) -> Json<Vec<SessionInfo>> {
    Json(svc.list_sessions())
}

async fn get_session(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<SessionInfo> {
    svc.session_info(parse_id(&id)?).map(Json)
}

async fn answer(State(svc): State<Arc<Service>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Stepped> {
    let id = parse_id(&id)?;
    let req: AnswerRequest = parse(&body)?;
    blocking(move || svc.answer(id, req.query_id, req.chosen)).await.map(Json)
}

async fn found(State(svc): State<Arc<Service>>, Path(id): Path<String>, body: Bytes) -> ApiResult<FoundResponse> {
    let id = parse_id(&id)?;
    let req: FoundRequest = parse(&body)?;
    blocking(move || svc.found(id, req.target)).await.map(|summary| Json(FoundResponse { summary }))
}

async fn object(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Candidate> {
    svc.object(parse_id(&id)?).map(Json)
}

async fn health(State(svc): State<Arc<Service>>) -> Json<Health> {
    Json(svc.health())
}

async fn retrain(State(svc): State<Arc<Service>>) -> ApiResult<RetrainSummary> {
    blocking(move || svc.retrain()).await.map(Json)
}

async fn fallback() -> ServiceError {
    ServiceError::NotFound("no such endpoint".into())
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/answer", post(answer))
        .route("/sessions/{id}/found", post(found))
        .route("/objects/{id}", get(object))
        .route("/health", get(health))
        .route("/admin/retrain", post(retrain))
        .fallback(fallback)
        .with_state(service)
}

/// Serves `service` on `addr` until the process is stopped.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    serve_on(service, tokio::net::TcpListener::bind(addr).await?).await
}

/// Serves `service` on an already bound listener.
pub async fn serve_on(service: Arc<Service>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service)).await
}
