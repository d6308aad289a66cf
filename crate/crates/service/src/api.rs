//! REST surface. Every route except `POST /auth/token` authenticates the
//! bearer token before looking at the request body.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::blobstore::BlobStore;
use crate::error::{Result, ServiceError};
use crate::experiment::{CrossSiteModel, ExperimentConfig};
use crate::fabric::{Fabric, Submission};
use crate::identity::{Action, Identity, IdentityService, Role};
use crate::metrics_log::MetricsLog;
use crate::orchestrator::Orchestrator;

#[derive(Clone)]
pub struct AppState {
    pub identity: Arc<IdentityService>,
    pub fabric: Arc<Fabric>,
    pub blobs: Arc<BlobStore>,
    pub metrics: Arc<MetricsLog>,
    pub orchestrator: Arc<Orchestrator>,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.to_json())).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenRequest {
    pub user_id: String,
    #[serde(default)]
    pub ttl_seconds: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenResponse {
    pub token: String,
    pub user_id: String,
    pub issued_at: u64,
    pub expires_at: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub endpoint_id: String,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    #[serde(default)]
    pub group_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PollRequest {
    pub endpoint_id: String,
    #[serde(default)]
    pub wait_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossSiteRequest {
    pub models: Vec<CrossSiteModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMember {
    #[serde(flatten)]
    pub identity: Identity,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupView {
    pub group_id: String,
    pub members: Vec<GroupMember>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/auth/token", post(issue_token))
        .route("/groups", get(groups))
        .route("/endpoints", get(list_endpoints))
        .route("/endpoints/register", post(register_endpoint))
        .route("/endpoints/{id}", get(endpoint_status))
        .route("/endpoints/{id}/heartbeat", post(heartbeat))
        .route("/tasks/poll", post(poll_task))
        .route("/tasks/{id}/result", post(submit_result))
        .route("/blobs", put(put_blob))
        .route("/blobs/{sha256}", get(get_blob))
        .route("/experiments", post(create_experiment).get(list_experiments))
        .route("/experiments/{id}", get(experiment_state))
        .route("/experiments/{id}/start", post(start_experiment))
        .route("/experiments/{id}/stop", post(stop_experiment))
        .route("/experiments/{id}/metrics", get(metrics_feed))
        .route("/experiments/{id}/crosssite", get(get_crosssite).post(run_crosssite))
        .layer(DefaultBodyLimit::max(1 << 30))
        .with_state(state)
}

pub fn bearer(headers: &HeaderMap) -> Option<&str> {
    let v = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    v.strip_prefix("Bearer ").map(str::trim)
}

fn authenticate(s: &AppState, headers: &HeaderMap) -> Result<Identity> {
    s.identity.authenticate(bearer(headers))
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("request body: {e}")))
}

fn ok<T: Serialize>(v: T) -> Result<Json<Value>> {
    serde_json::to_value(v).map(Json).map_err(|e| ServiceError::Internal(e.to_string()))
}

/// Users sharing at least one group with `user_id`, including themselves.
fn peers(s: &AppState, user_id: &str) -> Vec<String> {
    let roster = s.identity.roster();
    let mut out: Vec<String> = roster.groups_of(user_id).flat_map(|g| g.members.keys().cloned()).collect();
    out.sort();
    out.dedup();
    out
}

async fn issue_token(State(s): State<AppState>, body: Bytes) -> Result<Json<Value>> {
    let req: TokenRequest = parse(&body)?;
    let t = s.identity.issue_token(&req.user_id, req.ttl_seconds)?;
    ok(TokenResponse { token: t.token_id, user_id: t.user_id, issued_at: t.issued_at, expires_at: t.expires_at })
}

async fn groups(State(s): State<AppState>, headers: HeaderMap) -> Result<Json<Value>> {
    let who = authenticate(&s, &headers)?;
    let roster = s.identity.roster();
    let groups: Vec<GroupView> = roster
        .groups_of(&who.user_id)
        .map(|g| GroupView {
            group_id: g.group_id.clone(),
            members: g
                .members
                .iter()
                .map(|(uid, role)| GroupMember {
                    identity: roster.user(uid).cloned().unwrap_or(Identity { user_id: uid.clone(), display_name: String::new(), institution: String::new() }),
                    role: *role,
                })
                .collect(),
        })
        .collect();
    ok(json!({ "user": who, "groups": groups }))
}

async fn list_endpoints(State(s): State<AppState>, headers: HeaderMap) -> Result<Json<Value>> {
    let who = authenticate(&s, &headers)?;
    s.identity.authorize(&who, Action::RegisterEndpoint, None)?;
    let visible = peers(&s, &who.user_id);
    let list: Vec<_> = s.fabric.endpoints().into_iter().filter(|e| visible.contains(&e.owner)).collect();
    ok(json!({ "endpoints": list }))
}

async fn endpoint_status(State(s): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> Result<Json<Value>> {
    let who = authenticate(&s, &headers)?;
    s.identity.authorize(&who, Action::RegisterEndpoint, None)?;
    match s.fabric.endpoint(&id) {
        Some(rec) if peers(&s, &who.user_id).contains(&rec.owner) => ok(rec),
        _ => Err(ServiceError::NotFound(format!("endpoint {id}"))),
    }
}

async fn register_endpoint(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Json<Value>> {
    let who = authenticate(&s, &headers)?;
    let req: RegisterRequest = parse(&body)?;
    s.identity.authorize(&who, Action::RegisterEndpoint, req.group_id.as_deref())?;
    ok(s.fabric.register(&who.user_id, &req.endpoint_id, req.labels)?)
}

async fn heartbeat(State(s): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> Result<Json<Value>> {
    let who = authenticate(&s, &headers)?;
    s.identity.authorize(&who, Action::RegisterEndpoint, None)?;
    ok(s.fabric.heartbeat(&who.user_id, &id)?)
}

async fn poll_task(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Json<Value>> {
    let who = authenticate(&s, &headers)?;
    s.identity.authorize(&who, Action::PollTask, None)?;
    let req: PollRequest = parse(&body)?;
    let task = s.fabric.poll(&who.user_id, &req.endpoint_id, req.wait_ms).await?;
    ok(json!({ "task": task }))
}

async fn submit_result(State(s): State<AppState>, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>> {
    let who = authenticate(&s, &headers)?;
    s.identity.authorize(&who, Action::SubmitResult, None)?;
    let sub: Submission = parse(&body)?;
    if sub.result.task_id != id {
        return Err(ServiceError::BadRequest(format!("body names task {} but the path names {id}", sub.result.task_id)));
    }
    if let Some(b) = &sub.result.result_blob {
        if !s.blobs.contains(&b.sha256_hex) {
            return Err(ServiceError::BadRequest(format!("result blob {} was never uploaded", b.sha256_hex)));
        }
    }
    s.fabric.submit(&who.user_id, sub)?;
    ok(json!({ "accepted": true, "task_id": id }))
}

async fn put_blob(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Json<Value>> {
    let who = authenticate(&s, &headers)?;
    s.identity.authorize(&who, Action::SubmitResult, None)?;
    ok(s.blobs.put(&body)?)
}

async fn get_blob(State(s): State<AppState>, headers: HeaderMap, Path(hash): Path<String>) -> Result<Response> {
    let who = authenticate(&s, &headers)?;
    s.identity.authorize(&who, Action::PollTask, None)?;
    let bytes = s.blobs.get(&hash)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn create_experiment(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Json<Value>> {
    let who = authenticate(&s, &headers)?;
    let config: ExperimentConfig = parse(&body)?;
    s.identity.authorize(&who, Action::CreateExperiment, Some(&config.group_id))?;
    let roster = s.identity.roster();
    ok(s.orchestrator.create(&who, &roster, config)?)
}

async fn list_experiments(State(s): State<AppState>, headers: HeaderMap) -> Result<Json<Value>> {
    let who = authenticate(&s, &headers)?;
    s.identity.authorize(&who, Action::PollTask, None)?;
    let roster = s.identity.roster();
    let mine: Vec<String> = roster.groups_of(&who.user_id).map(|g| g.group_id.clone()).collect();
    let list: Vec<_> = s.orchestrator.list().into_iter().filter(|e| mine.contains(&e.group_id)).collect();
    ok(json!({ "experiments": list }))
}

fn authorize_on(s: &AppState, who: &Identity, id: &str, action: Action) -> Result<()> {
    let group = s.orchestrator.group_of(id)?;
    s.identity.authorize(who, action, Some(&group))
}

async fn experiment_state(State(s): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> Result<Json<Value>> {
    let who = authenticate(&s, &headers)?;
    authorize_on(&s, &who, &id, Action::ReadMetrics)?;
    ok(s.orchestrator.view(&id)?)
}

async fn start_experiment(State(s): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> Result<Json<Value>> {
    let who = authenticate(&s, &headers)?;
    authorize_on(&s, &who, &id, Action::StartExperiment)?;
    s.orchestrator.start(&id)?;
    ok(json!({ "started": true, "experiment_id": id }))
}

async fn stop_experiment(State(s): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> Result<Json<Value>> {
    let who = authenticate(&s, &headers)?;
    authorize_on(&s, &who, &id, Action::StartExperiment)?;
    ok(s.orchestrator.stop(&id, &who.user_id)?)
}

async fn metrics_feed(State(s): State<AppState>, headers: HeaderMap, Path(id): Path<String>, Query(q): Query<HashMap<String, String>>) -> Result<Json<Value>> {
    let who = authenticate(&s, &headers)?;
    authorize_on(&s, &who, &id, Action::ReadMetrics)?;
    let num = |k: &str| -> Result<Option<u64>> {
        q.get(k).map(|v| v.parse::<u64>().map_err(|_| ServiceError::BadRequest(format!("{k} must be a non-negative integer")))).transpose()
    };
    let cursor = num("cursor")?.unwrap_or(0);
    let limit = num("limit")?.map(|l| l as usize);
    ok(s.metrics.feed(&id, cursor, limit)?)
}

async fn get_crosssite(State(s): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> Result<Json<Value>> {
    let who = authenticate(&s, &headers)?;
    authorize_on(&s, &who, &id, Action::ReadMetrics)?;
    match s.orchestrator.crosssite(&id)? {
        Some(m) => ok(m),
        None => Err(ServiceError::NotFound(format!("no cross-site matrix for experiment {id} yet"))),
    }
}

async fn run_crosssite(State(s): State<AppState>, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>> {
    let who = authenticate(&s, &headers)?;
    authorize_on(&s, &who, &id, Action::StartExperiment)?;
    let req: CrossSiteRequest = parse(&body)?;
    ok(s.orchestrator.crosssite_explicit(&id, &req.models).await?)
}
