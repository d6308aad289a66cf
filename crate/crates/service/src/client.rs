//! Blocking HTTP client for the REST surface, used by the agent and the CLI.

use std::collections::BTreeMap;
use std::time::Duration;

use fedx_core::blob::{sha256_hex, BlobRef};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::api::{CrossSiteRequest, PollRequest, RegisterRequest, TokenRequest, TokenResponse};
use crate::experiment::{CrossSiteMatrix, CrossSiteModel, ExperimentView};
use crate::fabric::{EndpointRecord, Submission, TaskEnvelope};
use crate::metrics_log::MetricsPage;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach server: {0}")]
    Connect(String),

    /// A non-2xx reply with the server's `{"code", "message"}` body.
    #[error("{status} {code}: {message}")]
    Api { status: u16, code: String, message: String, body: Value },

    #[error("unexpected response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }

    /// A string field of the error body, such as a denial `reason`.
    pub fn body_field(&self, key: &str) -> Option<String> {
        match self {
            ClientError::Api { body, .. } => body.get(key).and_then(Value::as_str).map(String::from),
            _ => None,
        }
    }

    pub fn code(&self) -> &str {
        match self {
            ClientError::Connect(_) => "unreachable",
            ClientError::Api { code, .. } => code,
            ClientError::Decode(_) => "bad_response",
        }
    }
}

pub type ClientResult<T> = std::result::Result<T, ClientError>;

#[derive(Clone)]
pub struct Client {
    base: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl Client {
    pub fn new(base: &str, token: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_connect(Some(Duration::from_secs(5)))
            .build()
            .into();
        Self { base: base.trim_end_matches('/').to_string(), token, agent }
    }

    pub fn with_token(&self, token: &str) -> Self {
        Self { token: Some(token.into()), ..self.clone() }
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn auth<B>(&self, req: ureq::RequestBuilder<B>) -> ureq::RequestBuilder<B> {
        match &self.token {
            Some(t) => req.header("Authorization", format!("Bearer {t}")),
            None => req,
        }
    }

    fn finish(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> ClientResult<Vec<u8>> {
        let mut resp = resp.map_err(|e| ClientError::Connect(e.to_string()))?;
        let status = resp.status().as_u16();
        let bytes = resp.body_mut().with_config().limit(u64::MAX).read_to_vec().map_err(|e| ClientError::Connect(e.to_string()))?;
        if (200..300).contains(&status) {
            return Ok(bytes);
        }
        let body: Value = serde_json::from_slice(&bytes).unwrap_or_else(|_| json!({ "raw": String::from_utf8_lossy(&bytes) }));
        let code = body.get("code").and_then(Value::as_str).unwrap_or("http_error").to_string();
        let message = body.get("message").and_then(Value::as_str).unwrap_or("").to_string();
        Err(ClientError::Api { status, code, message, body })
    }

    fn decode<T: DeserializeOwned>(bytes: &[u8]) -> ClientResult<T> {
        serde_json::from_slice(bytes).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn get_raw(&self, path: &str) -> ClientResult<Vec<u8>> {
        Self::finish(self.auth(self.agent.get(&self.url(path))).call())
    }

    pub fn get<T: DeserializeOwned>(&self, path: &str) -> ClientResult<T> {
        Self::decode(&self.get_raw(path)?)
    }

    pub fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> ClientResult<T> {
        Self::decode(&Self::finish(self.auth(self.agent.post(&self.url(path))).send_json(body))?)
    }

    /// Sends arbitrary bytes; for probing the server with malformed input.
    pub fn send_raw(&self, method: &str, path: &str, body: &[u8]) -> ClientResult<Vec<u8>> {
        let url = self.url(path);
        let resp = match method {
            "GET" => self.auth(self.agent.get(&url)).call(),
            "PUT" => self.auth(self.agent.put(&url)).header("Content-Type", "application/octet-stream").send(body),
            _ => self.auth(self.agent.post(&url)).header("Content-Type", "application/json").send(body),
        };
        Self::finish(resp)
    }

    pub fn login(&self, user_id: &str, ttl_seconds: Option<u64>) -> ClientResult<TokenResponse> {
        self.post("/auth/token", &TokenRequest { user_id: user_id.into(), ttl_seconds })
    }

    pub fn groups(&self) -> ClientResult<Value> {
        self.get("/groups")
    }

    pub fn register_endpoint(&self, endpoint_id: &str, labels: BTreeMap<String, String>, group_id: Option<&str>) -> ClientResult<EndpointRecord> {
        self.post("/endpoints/register", &RegisterRequest { endpoint_id: endpoint_id.into(), labels, group_id: group_id.map(String::from) })
    }

    pub fn heartbeat(&self, endpoint_id: &str) -> ClientResult<EndpointRecord> {
        self.post(&format!("/endpoints/{endpoint_id}/heartbeat"), &json!({}))
    }

    pub fn endpoint(&self, endpoint_id: &str) -> ClientResult<EndpointRecord> {
        self.get(&format!("/endpoints/{endpoint_id}"))
    }

    pub fn endpoints(&self) -> ClientResult<Vec<EndpointRecord>> {
        let v: Value = self.get("/endpoints")?;
        serde_json::from_value(v["endpoints"].clone()).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn poll(&self, endpoint_id: &str, wait_ms: u64) -> ClientResult<Option<TaskEnvelope>> {
        let v: Value = self.post("/tasks/poll", &PollRequest { endpoint_id: endpoint_id.into(), wait_ms })?;
        serde_json::from_value(v["task"].clone()).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn submit(&self, sub: &Submission) -> ClientResult<Value> {
        self.post(&format!("/tasks/{}/result", sub.result.task_id), sub)
    }

    pub fn put_blob(&self, bytes: &[u8]) -> ClientResult<BlobRef> {
        let resp = self.auth(self.agent.put(&self.url("/blobs"))).header("Content-Type", "application/octet-stream").send(bytes);
        Self::decode(&Self::finish(resp)?)
    }

    /// Fetches a blob and checks its hash on this side too.
    pub fn get_blob(&self, hash: &str) -> ClientResult<Vec<u8>> {
        let bytes = self.get_raw(&format!("/blobs/{hash}"))?;
        if sha256_hex(&bytes) != hash {
            return Err(ClientError::Decode(format!("blob {hash} arrived corrupted")));
        }
        Ok(bytes)
    }

    pub fn create_experiment(&self, config: &Value) -> ClientResult<ExperimentView> {
        self.post("/experiments", config)
    }

    pub fn start_experiment(&self, id: &str) -> ClientResult<Value> {
        self.post(&format!("/experiments/{id}/start"), &json!({}))
    }

    pub fn stop_experiment(&self, id: &str) -> ClientResult<ExperimentView> {
        self.post(&format!("/experiments/{id}/stop"), &json!({}))
    }

    pub fn experiment(&self, id: &str) -> ClientResult<ExperimentView> {
        self.get(&format!("/experiments/{id}"))
    }

    pub fn experiments(&self) -> ClientResult<Vec<ExperimentView>> {
        let v: Value = self.get("/experiments")?;
        serde_json::from_value(v["experiments"].clone()).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn metrics(&self, id: &str, cursor: u64) -> ClientResult<MetricsPage> {
        self.get(&format!("/experiments/{id}/metrics?cursor={cursor}"))
    }

    pub fn crosssite(&self, id: &str) -> ClientResult<CrossSiteMatrix> {
        self.get(&format!("/experiments/{id}/crosssite"))
    }

    pub fn run_crosssite(&self, id: &str, models: Vec<CrossSiteModel>) -> ClientResult<CrossSiteMatrix> {
        self.post(&format!("/experiments/{id}/crosssite"), &CrossSiteRequest { models })
    }

    /// Polls the experiment until it reaches a terminal phase.
    pub fn wait_finished(&self, id: &str, timeout: Duration) -> ClientResult<ExperimentView> {
        let start = std::time::Instant::now();
        loop {
            let view = self.experiment(id)?;
            if view.phase.is_terminal() || start.elapsed() > timeout {
                return Ok(view);
            }
            std::thread::sleep(Duration::from_millis(50));
        }
    }
}
