use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::api::{router, AppState};
use crate::blobstore::BlobStore;
use crate::clock::{Clock, SystemClock};
use crate::error::{Result, ServiceError};
use crate::fabric::{Fabric, FabricConfig};
use crate::identity::{IdentityService, Roster, DEFAULT_TOKEN_TTL_S};
use crate::metrics_log::MetricsLog;
use crate::orchestrator::{Orchestrator, OrchestratorConfig};

/// Server config file. Missing fields take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub lease_ms: u64,
    pub poll_cap_ms: u64,
    pub heartbeat_ms: u64,
    pub clients_ready_timeout_ms: u64,
    pub round_timeout_ms: u64,
    pub token_ttl_s: u64,
    /// Blob directory; blobs stay in memory when unset.
    pub blob_dir: Option<PathBuf>,
    /// Directory for per-experiment metrics JSON-lines files.
    pub metrics_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        let f = FabricConfig::default();
        let o = OrchestratorConfig::default();
        Self {
            lease_ms: f.lease_ms,
            poll_cap_ms: f.poll_cap_ms,
            heartbeat_ms: f.heartbeat_ms,
            clients_ready_timeout_ms: o.clients_ready_timeout_ms,
            round_timeout_ms: o.round_timeout_ms,
            token_ttl_s: DEFAULT_TOKEN_TTL_S,
            blob_dir: None,
            metrics_dir: None,
        }
    }
}

impl ServerConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ServiceError::BadRequest(format!("server config: {e}")))
    }
}

pub fn build_state(cfg: &ServerConfig, roster: Roster, clock: Arc<dyn Clock>) -> Result<AppState> {
    roster.validate()?;
    let blobs = match &cfg.blob_dir {
        Some(dir) => BlobStore::directory(dir.clone())?,
        None => BlobStore::memory(),
    };
    let fabric = Arc::new(Fabric::new(FabricConfig { lease_ms: cfg.lease_ms, poll_cap_ms: cfg.poll_cap_ms, heartbeat_ms: cfg.heartbeat_ms }, clock.clone()));
    let blobs = Arc::new(blobs);
    let metrics = Arc::new(MetricsLog::new(cfg.metrics_dir.clone(), clock.clone())?);
    let orchestrator = Arc::new(Orchestrator::new(
        fabric.clone(),
        blobs.clone(),
        metrics.clone(),
        clock.clone(),
        OrchestratorConfig { clients_ready_timeout_ms: cfg.clients_ready_timeout_ms, round_timeout_ms: cfg.round_timeout_ms },
    ));
    let identity = Arc::new(IdentityService::new(roster, clock, cfg.token_ttl_s));
    Ok(AppState { identity, fabric, blobs, metrics, orchestrator })
}

/// Serves until the process ends.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// A server on its own runtime thread, for tests and the demo.
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub state: AppState,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn spawn(cfg: &ServerConfig, roster: Roster, listen: &str) -> Result<ServerHandle> {
    spawn_with_clock(cfg, roster, listen, Arc::new(SystemClock))
}

pub fn spawn_with_clock(cfg: &ServerConfig, roster: Roster, listen: &str, clock: Arc<dyn Clock>) -> Result<ServerHandle> {
    let state = build_state(cfg, roster, clock)?;
    let std_listener = std::net::TcpListener::bind(listen)?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let app = router(state.clone());
    let thread = std::thread::Builder::new().name("fedx-server".into()).spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().expect("tokio runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
            tokio::select! {
                _ = std::future::IntoFuture::into_future(axum::serve(listener, app)) => {}
                _ = rx => {}
            }
        });
        rt.shutdown_timeout(std::time::Duration::from_millis(200));
    })?;
    Ok(ServerHandle { addr, state, shutdown: Some(tx), thread: Some(thread) })
}
