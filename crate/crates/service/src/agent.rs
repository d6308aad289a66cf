//! Client-side endpoint: long-polls for tasks, runs them against the local
//! dataset and reports back. Only models, gradients and metrics leave.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use fedx_core::data::SiteData;
use fedx_core::federation::{evaluate, personalize, ClientSession, EvalReport};
use fedx_core::inversion::capture_gradient;
use fedx_core::tensor::{ModelSnapshot, ModelSpec, ModelState};
use serde::{Deserialize, Serialize};

use crate::client::{Client, ClientError, ClientResult};
use crate::experiment::{CaptureTask, EvalTask, TrainMetrics, TrainTask};
use crate::fabric::{ResultStatus, Submission, TaskEnvelope, TaskFunction, TaskResult};

/// Sees every pre-noise training result before privatization. Test
/// instrumentation only; nothing it receives is transmitted.
pub type RawUpdateHook = Arc<dyn Fn(&TaskEnvelope, &ModelSnapshot) + Send + Sync>;

pub struct Executed {
    pub blob: Option<Vec<u8>>,
    pub metrics_json: String,
}

/// Runs task functions against one site's data. Keeps a training session
/// per (experiment, client) so optimizer state carries across rounds.
pub struct Executor {
    site: SiteData,
    sessions: HashMap<(String, String), ClientSession>,
    pub on_raw_update: Option<RawUpdateHook>,
}

impl Executor {
    pub fn new(site: SiteData) -> Self {
        Self { site, sessions: HashMap::new(), on_raw_update: None }
    }

    pub fn site(&self) -> &SiteData {
        &self.site
    }

    fn check(&self, dataset_ref: &str, model: &ModelSpec) -> Result<(), String> {
        if dataset_ref != self.site.site_id {
            return Err(format!("dataset {dataset_ref} is not held by this endpoint (holds {})", self.site.site_id));
        }
        if model.input_dim() != self.site.train.feature_dim() {
            return Err(format!("model expects {} features, dataset has {}", model.input_dim(), self.site.train.feature_dim()));
        }
        if model.task != self.site.task {
            return Err(format!("model task {:?} does not match dataset task {:?}", model.task, self.site.task));
        }
        Ok(())
    }

    pub fn execute(&mut self, env: &TaskEnvelope, model_bytes: &[u8]) -> Result<Executed, String> {
        let snapshot = ModelSnapshot::from_bytes(model_bytes).map_err(|e| format!("model blob: {e}"))?;
        match env.function {
            TaskFunction::Train => self.train(env, &snapshot),
            TaskFunction::Evaluate => self.evaluate(env, &snapshot),
            TaskFunction::CaptureGradient => self.capture(env, &snapshot),
        }
    }

    fn train(&mut self, env: &TaskEnvelope, global: &ModelSnapshot) -> Result<Executed, String> {
        let t: TrainTask = serde_json::from_str(&env.config_json).map_err(|e| format!("task config: {e}"))?;
        self.check(&t.dataset_ref, &t.model)?;
        let session = self.sessions.entry((t.experiment_id.clone(), t.client_id.clone())).or_default();
        let out = session
            .train_round(&t.model, global, &self.site, &t.train, t.round, &t.dp, t.seed, &t.client_id)
            .map_err(|e| e.to_string())?;
        if let Some(hook) = &self.on_raw_update {
            hook(env, &out.raw);
        }
        let (val_metric_name, val_metric) = match session.state().map(|s| evaluate(s, &self.site.val, 0, 0)) {
            Some(Ok(r)) => (r.metric_name, r.metric_value),
            _ => ("loss".to_string(), out.val_loss),
        };
        let m = TrainMetrics { n_samples: out.n_samples, train_loss: out.train_loss, val_loss: out.val_loss, val_metric_name, val_metric };
        Ok(Executed { blob: Some(out.outgoing.to_bytes()), metrics_json: serde_json::to_string(&m).unwrap() })
    }

    fn evaluate(&mut self, env: &TaskEnvelope, snap: &ModelSnapshot) -> Result<Executed, String> {
        let t: EvalTask = serde_json::from_str(&env.config_json).map_err(|e| format!("task config: {e}"))?;
        self.check(&t.dataset_ref, &t.model)?;
        let state = match &t.fine_tune {
            Some(ft) => personalize(&t.model, snap, &self.site, &ft.train, ft.epochs, t.seed),
            None => ModelState::from_snapshot(&t.model, snap, t.seed),
        }
        .map_err(|e| e.to_string())?;
        let report: EvalReport = evaluate(&state, &self.site.test, t.n_boot, t.seed).map_err(|e| e.to_string())?;
        Ok(Executed { blob: None, metrics_json: serde_json::to_string(&report).unwrap() })
    }

    fn capture(&mut self, env: &TaskEnvelope, snap: &ModelSnapshot) -> Result<Executed, String> {
        let t: CaptureTask = serde_json::from_str(&env.config_json).map_err(|e| format!("task config: {e}"))?;
        self.check(&t.dataset_ref, &t.model)?;
        let b = t.batch_size.clamp(1, self.site.train.len());
        let idx: Vec<usize> = (0..b).collect();
        let state = ModelState::from_snapshot(&t.model, snap, t.seed).map_err(|e| e.to_string())?;
        let captured = capture_gradient(&state, &self.site.train.batch(&idx), t.dp.as_ref(), t.seed).map_err(|e| e.to_string())?;
        let bytes = captured.to_bytes().map_err(|e| e.to_string())?;
        Ok(Executed { blob: Some(bytes), metrics_json: serde_json::json!({ "batch_size": b }).to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub endpoint_id: String,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    #[serde(default)]
    pub group_id: Option<String>,
    pub poll_wait_ms: u64,
    pub heartbeat_ms: u64,
    #[serde(default)]
    pub verbose: bool,
}

impl AgentConfig {
    pub fn new(endpoint_id: &str) -> Self {
        Self { endpoint_id: endpoint_id.into(), labels: BTreeMap::new(), group_id: None, poll_wait_ms: 20_000, heartbeat_ms: 10_000, verbose: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentStats {
    pub completed: u64,
    pub failed: u64,
    pub rejected: u64,
}

fn is_transient(e: &ClientError) -> bool {
    matches!(e, ClientError::Connect(_)) || e.status().is_some_and(|s| s >= 500)
}

/// Registers, heartbeats in the background and serves tasks until `stop`.
pub fn run_agent(client: &Client, cfg: &AgentConfig, exec: &mut Executor, stop: Arc<AtomicBool>) -> ClientResult<AgentStats> {
    client.register_endpoint(&cfg.endpoint_id, cfg.labels.clone(), cfg.group_id.as_deref())?;
    let beat = {
        let (client, id, stop, every) = (client.clone(), cfg.endpoint_id.clone(), stop.clone(), cfg.heartbeat_ms.max(10));
        std::thread::spawn(move || {
            let tick = Duration::from_millis(every.min(50));
            let mut waited = 0;
            while !stop.load(Ordering::Relaxed) {
                std::thread::sleep(tick);
                waited += tick.as_millis() as u64;
                if waited >= every {
                    waited = 0;
                    let _ = client.heartbeat(&id);
                }
            }
        })
    };
    let mut stats = AgentStats::default();
    let result = loop {
        if stop.load(Ordering::Relaxed) {
            break Ok(stats);
        }
        let env = match client.poll(&cfg.endpoint_id, cfg.poll_wait_ms) {
            Ok(Some(env)) => env,
            Ok(None) => continue,
            Err(e) if is_transient(&e) => {
                std::thread::sleep(Duration::from_millis(200));
                continue;
            }
            Err(e) => break Err(e),
        };
        if cfg.verbose {
            eprintln!("{} {:?} round {} ({})", env.task_id, env.function, env.round, env.experiment_id);
        }
        let outcome = client.get_blob(&env.model_blob.sha256_hex).map_err(|e| e.to_string()).and_then(|bytes| exec.execute(&env, &bytes));
        let result = match outcome {
            Ok(done) => {
                let blob = match done.blob {
                    Some(b) => match client.put_blob(&b) {
                        Ok(r) => Some(r),
                        Err(e) if is_transient(&e) => continue,
                        Err(e) => break Err(e),
                    },
                    None => None,
                };
                TaskResult { task_id: env.task_id.clone(), status: ResultStatus::Ok, result_blob: blob, metrics_json: done.metrics_json, error: None }
            }
            Err(msg) => TaskResult { task_id: env.task_id.clone(), status: ResultStatus::Failed, result_blob: None, metrics_json: String::new(), error: Some(msg) },
        };
        let failed = result.status == ResultStatus::Failed;
        let sub = Submission { endpoint_id: cfg.endpoint_id.clone(), lease_id: env.lease_id.clone(), result };
        match client.submit(&sub) {
            Ok(_) if failed => stats.failed += 1,
            Ok(_) => stats.completed += 1,
            Err(e) if matches!(e.status(), Some(409)) => stats.rejected += 1,
            Err(e) if is_transient(&e) => stats.rejected += 1,
            Err(e) => break Err(e),
        }
    };
    stop.store(true, Ordering::Relaxed);
    let _ = beat.join();
    result
}
