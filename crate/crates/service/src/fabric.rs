//! Endpoint registry and the pull-based task queue.
//!
//! Tasks are addressed to one endpoint. A poll leases the oldest available
//! task for that endpoint; a lease that runs out without a result puts the
//! task back. A result is accepted only from the current lease holder, with
//! the current lease id, before expiry, and only once.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use fedx_core::blob::BlobRef;
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

use crate::clock::{rfc3339, Clock};
use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FabricConfig {
    pub lease_ms: u64,
    pub poll_cap_ms: u64,
    pub heartbeat_ms: u64,
}

impl Default for FabricConfig {
    fn default() -> Self {
        Self { lease_ms: 300_000, poll_cap_ms: 30_000, heartbeat_ms: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointStatus {
    Online,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointRecord {
    pub endpoint_id: String,
    pub owner: String,
    pub status: EndpointStatus,
    pub last_heartbeat: String,
    pub last_heartbeat_ms: u64,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFunction {
    Train,
    Evaluate,
    CaptureGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEnvelope {
    pub task_id: String,
    pub experiment_id: String,
    pub function: TaskFunction,
    pub round: u32,
    pub model_blob: BlobRef,
    pub config_json: String,
    pub assigned_endpoint: String,
    /// Set when leased; a result must quote it.
    #[serde(default)]
    pub lease_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub status: ResultStatus,
    #[serde(default)]
    pub result_blob: Option<BlobRef>,
    #[serde(default)]
    pub metrics_json: String,
    #[serde(default)]
    pub error: Option<String>,
}

/// Body of a result submission: the result plus the lease it answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub endpoint_id: String,
    pub lease_id: String,
    #[serde(flatten)]
    pub result: TaskResult,
}

#[derive(Debug, Clone, PartialEq)]
enum TaskState {
    Queued,
    Leased { lease_id: String, expires_ms: u64 },
    Completed(TaskResult),
    Cancelled,
}

#[derive(Debug)]
struct Task {
    seq: u64,
    envelope: TaskEnvelope,
    state: TaskState,
    deliveries: u32,
}

#[derive(Debug)]
struct Endpoint {
    owner: String,
    labels: BTreeMap<String, String>,
    last_heartbeat_ms: u64,
}

#[derive(Default)]
struct State {
    endpoints: BTreeMap<String, Endpoint>,
    tasks: HashMap<String, Task>,
    /// Unfinished tasks per endpoint, by enqueue order.
    pending: HashMap<String, BTreeSet<(u64, String)>>,
    next_seq: u64,
    completions: u64,
}

/// Per-task bookkeeping visible to tests and operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub task_id: String,
    pub assigned_endpoint: String,
    pub state: String,
    pub deliveries: u32,
}

pub struct Fabric {
    state: Mutex<State>,
    changed: Notify,
    clock: Arc<dyn Clock>,
    cfg: FabricConfig,
}

const RECHECK: Duration = Duration::from_millis(100);

impl Fabric {
    pub fn new(cfg: FabricConfig, clock: Arc<dyn Clock>) -> Self {
        Self { state: Mutex::new(State::default()), changed: Notify::new(), clock, cfg }
    }

    pub fn config(&self) -> FabricConfig {
        self.cfg
    }

    fn record(&self, id: &str, e: &Endpoint, now: u64) -> EndpointRecord {
        let online = now.saturating_sub(e.last_heartbeat_ms) <= 3 * self.cfg.heartbeat_ms;
        EndpointRecord {
            endpoint_id: id.into(),
            owner: e.owner.clone(),
            status: if online { EndpointStatus::Online } else { EndpointStatus::Offline },
            last_heartbeat: rfc3339(e.last_heartbeat_ms),
            last_heartbeat_ms: e.last_heartbeat_ms,
            labels: e.labels.clone(),
        }
    }

    /// Creates or refreshes a registration. Only the original owner may
    /// re-register an id.
    pub fn register(&self, owner: &str, endpoint_id: &str, labels: BTreeMap<String, String>) -> Result<EndpointRecord> {
        if endpoint_id.is_empty() {
            return Err(ServiceError::BadRequest("endpoint_id must be nonempty".into()));
        }
        let now = self.clock.now_ms();
        let mut st = self.state.lock().unwrap();
        if let Some(e) = st.endpoints.get(endpoint_id) {
            if e.owner != owner {
                return Err(ServiceError::Conflict(format!("endpoint {endpoint_id} is owned by another user")));
            }
        }
        let e = Endpoint { owner: owner.into(), labels, last_heartbeat_ms: now };
        let rec = self.record(endpoint_id, &e, now);
        st.endpoints.insert(endpoint_id.into(), e);
        Ok(rec)
    }

    pub fn heartbeat(&self, caller: &str, endpoint_id: &str) -> Result<EndpointRecord> {
        let now = self.clock.now_ms();
        let mut st = self.state.lock().unwrap();
        let e = st.endpoints.get_mut(endpoint_id).ok_or_else(|| ServiceError::NotFound(format!("endpoint {endpoint_id}")))?;
        if e.owner != caller {
            return Err(ServiceError::Forbidden("not_owner".into()));
        }
        e.last_heartbeat_ms = now;
        let e = &st.endpoints[endpoint_id];
        Ok(self.record(endpoint_id, e, now))
    }

    pub fn endpoint(&self, endpoint_id: &str) -> Option<EndpointRecord> {
        let now = self.clock.now_ms();
        let st = self.state.lock().unwrap();
        st.endpoints.get(endpoint_id).map(|e| self.record(endpoint_id, e, now))
    }

    pub fn endpoints(&self) -> Vec<EndpointRecord> {
        let now = self.clock.now_ms();
        let st = self.state.lock().unwrap();
        st.endpoints.iter().map(|(id, e)| self.record(id, e, now)).collect()
    }

    fn check_owner(st: &State, caller: &str, endpoint_id: &str) -> Result<()> {
        let e = st.endpoints.get(endpoint_id).ok_or_else(|| ServiceError::NotFound(format!("endpoint {endpoint_id}")))?;
        if e.owner != caller {
            return Err(ServiceError::Forbidden("not_owner".into()));
        }
        Ok(())
    }

    pub fn enqueue(&self, experiment_id: &str, function: TaskFunction, round: u32, model_blob: BlobRef, config_json: String, endpoint_id: &str) -> String {
        let mut st = self.state.lock().unwrap();
        let seq = st.next_seq;
        st.next_seq += 1;
        let task_id = format!("task-{seq:08}");
        let envelope = TaskEnvelope {
            task_id: task_id.clone(),
            experiment_id: experiment_id.into(),
            function,
            round,
            model_blob,
            config_json,
            assigned_endpoint: endpoint_id.into(),
            lease_id: String::new(),
        };
        st.tasks.insert(task_id.clone(), Task { seq, envelope, state: TaskState::Queued, deliveries: 0 });
        st.pending.entry(endpoint_id.into()).or_default().insert((seq, task_id.clone()));
        drop(st);
        self.changed.notify_waiters();
        task_id
    }

    fn try_lease(&self, st: &mut State, endpoint_id: &str) -> Option<TaskEnvelope> {
        let now = self.clock.now_ms();
        let ids: Vec<String> = st.pending.get(endpoint_id)?.iter().map(|(_, id)| id.clone()).collect();
        for id in ids {
            let task = st.tasks.get_mut(&id).unwrap();
            let available = match &task.state {
                TaskState::Queued => true,
                TaskState::Leased { expires_ms, .. } => now >= *expires_ms,
                _ => false,
            };
            if available {
                let lease_id = format!("{:032x}", rand::random::<u128>());
                task.state = TaskState::Leased { lease_id: lease_id.clone(), expires_ms: now + self.cfg.lease_ms };
                task.deliveries += 1;
                let mut env = task.envelope.clone();
                env.lease_id = lease_id;
                return Some(env);
            }
        }
        None
    }

    /// Long-polls for up to `wait_ms` (capped) and leases at most one task.
    pub async fn poll(&self, caller: &str, endpoint_id: &str, wait_ms: u64) -> Result<Option<TaskEnvelope>> {
        let deadline = tokio::time::Instant::now() + Duration::from_millis(wait_ms.min(self.cfg.poll_cap_ms));
        loop {
            let notified = self.changed.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            {
                let mut st = self.state.lock().unwrap();
                Self::check_owner(&st, caller, endpoint_id)?;
                if let Some(env) = self.try_lease(&mut st, endpoint_id) {
                    return Ok(Some(env));
                }
            }
            let now = tokio::time::Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            let nap = (deadline - now).min(RECHECK);
            tokio::select! {
                _ = &mut notified => {}
                _ = tokio::time::sleep(nap) => {}
            }
        }
    }

    pub fn submit(&self, caller: &str, sub: Submission) -> Result<()> {
        let now = self.clock.now_ms();
        let mut st = self.state.lock().unwrap();
        Self::check_owner(&st, caller, &sub.endpoint_id)?;
        let task_id = sub.result.task_id.clone();
        let task = st.tasks.get_mut(&task_id).ok_or_else(|| ServiceError::NotFound(format!("task {task_id}")))?;
        if task.envelope.assigned_endpoint != sub.endpoint_id {
            return Err(ServiceError::Forbidden("not_lease_holder".into()));
        }
        match &task.state {
            TaskState::Completed(_) => return Err(ServiceError::Conflict(format!("task {task_id} already completed"))),
            TaskState::Cancelled => return Err(ServiceError::Conflict(format!("task {task_id} was cancelled"))),
            TaskState::Queued => return Err(ServiceError::Lease(format!("task {task_id} is not leased"))),
            TaskState::Leased { lease_id, expires_ms } => {
                if *lease_id != sub.lease_id {
                    return Err(ServiceError::Lease(format!("lease for task {task_id} is not current")));
                }
                if now >= *expires_ms {
                    return Err(ServiceError::Lease(format!("lease for task {task_id} expired")));
                }
            }
        }
        task.state = TaskState::Completed(sub.result);
        let seq = task.seq;
        if let Some(p) = st.pending.get_mut(&sub.endpoint_id) {
            p.remove(&(seq, task_id));
        }
        st.completions += 1;
        drop(st);
        self.changed.notify_waiters();
        Ok(())
    }

    pub fn result(&self, task_id: &str) -> Option<TaskResult> {
        match &self.state.lock().unwrap().tasks.get(task_id)?.state {
            TaskState::Completed(r) => Some(r.clone()),
            _ => None,
        }
    }

    /// Waits for a task's result until `timeout` passes.
    pub async fn wait_result(&self, task_id: &str, timeout: Duration) -> Option<TaskResult> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let notified = self.changed.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if let Some(r) = self.result(task_id) {
                return Some(r);
            }
            let now = tokio::time::Instant::now();
            if now >= deadline {
                return None;
            }
            tokio::select! {
                _ = &mut notified => {}
                _ = tokio::time::sleep((deadline - now).min(Duration::from_secs(1))) => {}
            }
        }
    }

    /// Withdraws an unfinished task; later submissions are rejected.
    pub fn cancel(&self, task_id: &str) {
        let mut st = self.state.lock().unwrap();
        let Some(task) = st.tasks.get_mut(task_id) else { return };
        if matches!(task.state, TaskState::Completed(_)) {
            return;
        }
        task.state = TaskState::Cancelled;
        let key = (task.seq, task_id.to_string());
        let ep = task.envelope.assigned_endpoint.clone();
        if let Some(p) = st.pending.get_mut(&ep) {
            p.remove(&key);
        }
    }

    pub fn task_info(&self, task_id: &str) -> Option<TaskInfo> {
        let st = self.state.lock().unwrap();
        let t = st.tasks.get(task_id)?;
        let state = match &t.state {
            TaskState::Queued => "queued",
            TaskState::Leased { .. } => "leased",
            TaskState::Completed(_) => "completed",
            TaskState::Cancelled => "cancelled",
        };
        Some(TaskInfo { task_id: task_id.into(), assigned_endpoint: t.envelope.assigned_endpoint.clone(), state: state.into(), deliveries: t.deliveries })
    }

    /// Number of accepted results since start.
    pub fn completions(&self) -> u64 {
        self.state.lock().unwrap().completions
    }
}
