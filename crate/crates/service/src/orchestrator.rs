//! Drives experiments over the fabric: one scheduler task per running
//! experiment, a synchronous barrier per round.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use fedx_core::aggregation::ClientUpdate;
use fedx_core::blob::BlobRef;
use fedx_core::error::Error as CoreError;
use fedx_core::federation::{aggregate_snapshots, EvalReport};
use fedx_core::seed;
use fedx_core::tensor::{ModelSnapshot, ModelState};
use serde::{Deserialize, Serialize};

use crate::blobstore::BlobStore;
use crate::clock::{rfc3339, Clock};
use crate::error::{Result, ServiceError};
use crate::experiment::*;
use crate::fabric::{EndpointStatus, Fabric, ResultStatus, TaskFunction};
use crate::identity::{Identity, Roster};
use crate::metrics_log::{MetricPhase, MetricsEntry, MetricsLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrchestratorConfig {
    pub clients_ready_timeout_ms: u64,
    pub round_timeout_ms: u64,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self { clients_ready_timeout_ms: 120_000, round_timeout_ms: 3_600_000 }
    }
}

struct Experiment {
    config: ExperimentConfig,
    owner: String,
    phase: Phase,
    started: bool,
    initial_global: BlobRef,
    current_global: BlobRef,
    history: Vec<RoundRecord>,
    crosssite: Option<CrossSiteMatrix>,
    created_at: String,
}

impl Experiment {
    fn view(&self) -> ExperimentView {
        ExperimentView {
            experiment_id: self.config.experiment_id.clone(),
            group_id: self.config.group_id.clone(),
            owner: self.owner.clone(),
            phase: self.phase.clone(),
            started: self.started,
            initial_global: self.initial_global.clone(),
            current_global: self.current_global.clone(),
            history: self.history.clone(),
            created_at: self.created_at.clone(),
            config: self.config.clone(),
        }
    }
}

pub struct Orchestrator {
    experiments: Mutex<BTreeMap<String, Arc<Mutex<Experiment>>>>,
    fabric: Arc<Fabric>,
    blobs: Arc<BlobStore>,
    metrics: Arc<MetricsLog>,
    clock: Arc<dyn Clock>,
    cfg: OrchestratorConfig,
}

/// Why a round could not complete.
struct Abort(String);

impl Orchestrator {
    pub fn new(fabric: Arc<Fabric>, blobs: Arc<BlobStore>, metrics: Arc<MetricsLog>, clock: Arc<dyn Clock>, cfg: OrchestratorConfig) -> Self {
        Self { experiments: Mutex::new(BTreeMap::new()), fabric, blobs, metrics, clock, cfg }
    }

    fn get(&self, id: &str) -> Result<Arc<Mutex<Experiment>>> {
        self.experiments.lock().unwrap().get(id).cloned().ok_or_else(|| ServiceError::NotFound(format!("experiment {id}")))
    }

    pub fn group_of(&self, id: &str) -> Result<String> {
        Ok(self.get(id)?.lock().unwrap().config.group_id.clone())
    }

    pub fn view(&self, id: &str) -> Result<ExperimentView> {
        Ok(self.get(id)?.lock().unwrap().view())
    }

    pub fn list(&self) -> Vec<ExperimentView> {
        let all: Vec<_> = self.experiments.lock().unwrap().values().cloned().collect();
        all.iter().map(|e| e.lock().unwrap().view()).collect()
    }

    pub fn crosssite(&self, id: &str) -> Result<Option<CrossSiteMatrix>> {
        Ok(self.get(id)?.lock().unwrap().crosssite.clone())
    }

    /// Validates, materializes the seeded initial global model and registers
    /// the experiment. Authorization is the caller's job.
    pub fn create(&self, owner: &Identity, roster: &Roster, mut config: ExperimentConfig) -> Result<ExperimentView> {
        let errs = validate_config(&config, roster, &|ep| self.fabric.endpoint(ep));
        if !errs.is_empty() {
            return Err(ServiceError::Validation(errs));
        }
        let initial = ModelState::init(&config.model, config.seed)?.snapshot();
        let blob = self.blobs.put(&initial.to_bytes())?;
        let mut map = self.experiments.lock().unwrap();
        if config.experiment_id.is_empty() {
            let mut n = map.len() + 1;
            while map.contains_key(&format!("exp-{n:04}")) {
                n += 1;
            }
            config.experiment_id = format!("exp-{n:04}");
        } else if map.contains_key(&config.experiment_id) {
            return Err(ServiceError::Conflict(format!("experiment {} exists", config.experiment_id)));
        }
        let id = config.experiment_id.clone();
        let exp = Experiment {
            config,
            owner: owner.user_id.clone(),
            phase: Phase::Created,
            started: false,
            initial_global: blob.clone(),
            current_global: blob,
            history: Vec::new(),
            crosssite: None,
            created_at: rfc3339(self.clock.now_ms()),
        };
        let view = exp.view();
        map.insert(id.clone(), Arc::new(Mutex::new(exp)));
        self.metrics.open(&id);
        Ok(view)
    }

    /// Launches the scheduler for an experiment; returns immediately.
    pub fn start(self: &Arc<Self>, id: &str) -> Result<()> {
        let exp = self.get(id)?;
        {
            let mut e = exp.lock().unwrap();
            if e.started {
                return Err(ServiceError::Conflict(format!("experiment {id} was already started")));
            }
            e.started = true;
        }
        let this = self.clone();
        let id = id.to_string();
        tokio::spawn(async move { this.run(&id).await });
        Ok(())
    }

    /// Moves a non-terminal experiment to failed.
    pub fn stop(&self, id: &str, by: &str) -> Result<ExperimentView> {
        let exp = self.get(id)?;
        let mut e = exp.lock().unwrap();
        if e.phase.is_terminal() {
            return Err(ServiceError::Conflict(format!("experiment {id} already finished")));
        }
        let cfg = (e.config.rounds, e.config.cross_site);
        e.phase = transition(&e.phase, &Event::Fail(format!("stopped by {by}")), cfg.0, cfg.1).map_err(|t| ServiceError::Internal(format!("{t:?}")))?;
        Ok(e.view())
    }

    /// Applies an event; false when the experiment already left the
    /// expected path (stopped from outside).
    fn advance(&self, exp: &Mutex<Experiment>, event: Event) -> bool {
        let mut e = exp.lock().unwrap();
        match transition(&e.phase, &event, e.config.rounds, e.config.cross_site) {
            Ok(next) => {
                e.phase = next;
                true
            }
            Err(_) => false,
        }
    }

    async fn run(self: Arc<Self>, id: &str) {
        let Ok(exp) = self.get(id) else { return };
        if let Err(Abort(reason)) = self.drive(&exp).await {
            self.advance(&exp, Event::Fail(reason));
        }
    }

    async fn drive(&self, exp: &Mutex<Experiment>) -> std::result::Result<(), Abort> {
        let (config, initial) = {
            let e = exp.lock().unwrap();
            (e.config.clone(), e.current_global.clone())
        };
        self.wait_clients(&config).await?;
        if !self.advance(exp, Event::ClientsOnline) || !self.advance(exp, Event::BeginTraining) {
            return Ok(());
        }
        let registered: Vec<String> = config.clients.iter().map(|c| c.client_id.clone()).collect();
        let mut global_ref = initial;
        let mut global = self.load_snapshot(&global_ref)?;
        for round in 0..config.rounds {
            let (next, record) = self.train_round(&config, round, &registered, &global, &global_ref).await?;
            global = next;
            global_ref = record.global.clone();
            {
                let mut e = exp.lock().unwrap();
                e.current_global = global_ref.clone();
                e.history.push(record);
            }
            if !self.advance(exp, Event::RoundDone) {
                return Ok(());
            }
        }
        if config.cross_site {
            let mut models = vec![CrossSiteModel { name: "global".into(), blob: global_ref.clone(), fine_tune: false }];
            if config.fine_tune.is_some() {
                models.push(CrossSiteModel { name: "global+ft".into(), blob: global_ref, fine_tune: true });
            }
            let matrix = self.evaluate(&config, &models).await.map_err(|e| Abort(e.to_string()))?;
            exp.lock().unwrap().crosssite = Some(matrix);
            self.advance(exp, Event::CrossSiteDone);
        }
        Ok(())
    }

    fn load_snapshot(&self, r: &BlobRef) -> std::result::Result<ModelSnapshot, Abort> {
        let bytes = self.blobs.get_ref(r).map_err(|e| Abort(e.to_string()))?;
        ModelSnapshot::from_bytes(&bytes).map_err(|e| Abort(format!("global model blob: {e}")))
    }

    async fn wait_clients(&self, config: &ExperimentConfig) -> std::result::Result<(), Abort> {
        let deadline = tokio::time::Instant::now() + Duration::from_millis(self.cfg.clients_ready_timeout_ms);
        loop {
            let offline: Vec<String> = config
                .clients
                .iter()
                .filter(|c| self.fabric.endpoint(&c.endpoint_id).is_none_or(|r| r.status != EndpointStatus::Online))
                .map(|c| c.endpoint_id.clone())
                .collect();
            if offline.is_empty() {
                return Ok(());
            }
            if tokio::time::Instant::now() >= deadline {
                return Err(Abort(format!("endpoints offline past the clients-ready timeout: {}", offline.join(", "))));
            }
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
    }

    async fn train_round(
        &self,
        config: &ExperimentConfig,
        round: u32,
        registered: &[String],
        global: &ModelSnapshot,
        global_ref: &BlobRef,
    ) -> std::result::Result<(ModelSnapshot, RoundRecord), Abort> {
        let eid = &config.experiment_id;
        let tasks: Vec<(String, String)> = config
            .clients
            .iter()
            .map(|c| {
                let payload = TrainTask {
                    experiment_id: eid.clone(),
                    client_id: c.client_id.clone(),
                    dataset_ref: c.dataset_ref.clone(),
                    model: config.model.clone(),
                    train: config.train.clone(),
                    dp: config.dp.clone(),
                    seed: config.seed,
                    round,
                };
                let json = serde_json::to_string(&payload).unwrap();
                (c.client_id.clone(), self.fabric.enqueue(eid, TaskFunction::Train, round, global_ref.clone(), json, &c.endpoint_id))
            })
            .collect();
        let deadline = tokio::time::Instant::now() + Duration::from_millis(self.cfg.round_timeout_ms);
        let fail_fast = matches!(config.quorum, fedx_core::aggregation::Quorum::FailFast);
        let mut updates = Vec::new();
        let mut reports = Vec::new();
        for (client_id, task_id) in &tasks {
            let left = deadline.saturating_duration_since(tokio::time::Instant::now());
            let Some(result) = self.fabric.wait_result(task_id, left).await else {
                self.fabric.cancel(task_id);
                continue;
            };
            let parsed = match result.status {
                ResultStatus::Failed => Err(result.error.clone().unwrap_or_else(|| "unspecified failure".into())),
                ResultStatus::Ok => self.parse_train_result(&result.result_blob, &result.metrics_json, global),
            };
            match parsed {
                Ok((snap, m)) => {
                    let update = ClientUpdate {
                        client_id: client_id.clone(),
                        round,
                        params: snap.params.clone(),
                        n_samples: m.n_samples,
                        train_loss: m.train_loss,
                    };
                    updates.push((update, snap));
                    reports.push((client_id.clone(), m));
                }
                Err(err) if fail_fast => {
                    for (_, t) in &tasks {
                        self.fabric.cancel(t);
                    }
                    return Err(Abort(format!("client {client_id} failed in round {round}: {err}")));
                }
                Err(_) => {}
            }
        }
        let (next, result) = aggregate_snapshots(global, round, registered, &updates, config.quorum, config.aggregate_bn_stats).map_err(|e| match e {
            CoreError::Quorum { missing } => Abort(format!("quorum not met in round {round}, missing clients: {}", missing.join(", "))),
            other => Abort(other.to_string()),
        })?;
        let blob = self.blobs.put(&next.to_bytes()).map_err(|e| Abort(e.to_string()))?;
        for (client_id, m) in &reports {
            let base = MetricsEntry {
                round,
                client_id: client_id.clone(),
                phase: MetricPhase::Train,
                loss: m.train_loss,
                metric_name: "loss".into(),
                metric_value: m.train_loss,
                model: None,
                n_samples: Some(m.n_samples),
            };
            let validate = MetricsEntry { phase: MetricPhase::Validate, loss: m.val_loss, metric_name: m.val_metric_name.clone(), metric_value: m.val_metric, n_samples: None, ..base.clone() };
            for entry in [base, validate] {
                self.metrics.append(eid, entry).map_err(|e| Abort(e.to_string()))?;
            }
        }
        let record = RoundRecord { round, global: blob, participants: reports.iter().map(|(c, _)| c.clone()).collect(), per_client_losses: result.per_client_losses };
        Ok((next, record))
    }

    fn parse_train_result(&self, blob: &Option<BlobRef>, metrics_json: &str, global: &ModelSnapshot) -> std::result::Result<(ModelSnapshot, TrainMetrics), String> {
        let r = blob.as_ref().ok_or("ok result without a model blob")?;
        let bytes = self.blobs.get_ref(r).map_err(|e| e.to_string())?;
        let snap = ModelSnapshot::from_bytes(&bytes).map_err(|e| e.to_string())?;
        if !snap.params.same_layout(&global.params) || !snap.buffers.same_layout(&global.buffers) {
            return Err("returned model has a foreign layout".into());
        }
        let m: TrainMetrics = serde_json::from_str(metrics_json).map_err(|e| format!("metrics: {e}"))?;
        if m.n_samples == 0 {
            return Err("client reported zero training samples".into());
        }
        Ok((snap, m))
    }

    /// Evaluates each model on every client's test split and assembles the
    /// matrix; failed evaluations leave a marked cell.
    async fn evaluate(&self, config: &ExperimentConfig, models: &[CrossSiteModel]) -> Result<CrossSiteMatrix> {
        let eid = &config.experiment_id;
        let round = config.rounds;
        let mut pending = Vec::new();
        for m in models {
            if !self.blobs.contains(&m.blob.sha256_hex) {
                return Err(ServiceError::NotFound(format!("blob {} for model {}", m.blob.sha256_hex, m.name)));
            }
            for c in &config.clients {
                let fine_tune = if m.fine_tune {
                    let epochs = config.fine_tune.map_or(fedx_core::tensor::DEFAULT_FINETUNE_EPOCHS, |f| f.epochs);
                    Some(FineTuneTask { epochs, train: config.train.clone() })
                } else {
                    None
                };
                let payload = EvalTask {
                    experiment_id: eid.clone(),
                    client_id: c.client_id.clone(),
                    dataset_ref: c.dataset_ref.clone(),
                    model: config.model.clone(),
                    fine_tune,
                    n_boot: config.n_boot,
                    seed: seed::derive(config.seed, &[seed::tag("eval"), seed::tag(&m.name), seed::tag(&c.client_id)]),
                };
                let json = serde_json::to_string(&payload).unwrap();
                pending.push(self.fabric.enqueue(eid, TaskFunction::Evaluate, round, m.blob.clone(), json, &c.endpoint_id));
            }
        }
        let deadline = tokio::time::Instant::now() + Duration::from_millis(self.cfg.round_timeout_ms);
        let mut rows = Vec::new();
        let mut tasks = pending.into_iter();
        for m in models {
            let mut cells = Vec::new();
            for c in &config.clients {
                let task_id = tasks.next().unwrap();
                let left = deadline.saturating_duration_since(tokio::time::Instant::now());
                let cell = match self.fabric.wait_result(&task_id, left).await {
                    None => {
                        self.fabric.cancel(&task_id);
                        CrossSiteCell { client_id: c.client_id.clone(), report: None, error: Some("timed out".into()) }
                    }
                    Some(r) if r.status == ResultStatus::Failed => {
                        CrossSiteCell { client_id: c.client_id.clone(), report: None, error: Some(r.error.unwrap_or_else(|| "unspecified failure".into())) }
                    }
                    Some(r) => match serde_json::from_str::<EvalReport>(&r.metrics_json) {
                        Ok(report) => CrossSiteCell { client_id: c.client_id.clone(), report: Some(report), error: None },
                        Err(e) => CrossSiteCell { client_id: c.client_id.clone(), report: None, error: Some(format!("metrics: {e}")) },
                    },
                };
                if let Some(rep) = &cell.report {
                    self.metrics.append(
                        eid,
                        MetricsEntry {
                            round,
                            client_id: c.client_id.clone(),
                            phase: MetricPhase::CrossSite,
                            loss: rep.loss,
                            metric_name: rep.metric_name.clone(),
                            metric_value: rep.metric_value,
                            model: Some(m.name.clone()),
                            n_samples: Some(rep.n_samples),
                        },
                    )?;
                }
                cells.push(cell);
            }
            let weighted_average = weighted_column(&cells);
            rows.push(CrossSiteRow { model: m.name.clone(), cells, weighted_average });
        }
        Ok(CrossSiteMatrix { clients: config.clients.iter().map(|c| c.client_id.clone()).collect(), rows })
    }

    /// Cross-site validation of an explicit model list (for instance
    /// local-only baselines trained in other experiments) over this
    /// experiment's clients. The result replaces the stored matrix.
    pub async fn crosssite_explicit(&self, id: &str, models: &[CrossSiteModel]) -> Result<CrossSiteMatrix> {
        if models.is_empty() {
            return Err(ServiceError::Validation(vec![crate::error::FieldError::new("models", "must be nonempty")]));
        }
        let exp = self.get(id)?;
        let config = exp.lock().unwrap().config.clone();
        let matrix = self.evaluate(&config, models).await?;
        exp.lock().unwrap().crosssite = Some(matrix.clone());
        Ok(matrix)
    }
}
