//! Client-side round logic and an in-process federation driver.
//!
//! The networked agent and the in-process driver share `ClientSession` and
//! `aggregate_snapshots`, so a run over the fabric and a run here with the
//! same seeds produce bit-identical models.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggregation::{run_round, weighted_average, ClientUpdate, Quorum, RoundResult};
use crate::data::{Dataset, SiteData, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix, RocResult};
use crate::privacy::{privatize_update, DpConfig};
use crate::seed;
use crate::tensor::{evaluate_loss, finetune, local_train, predict, ModelSnapshot, ModelSpec, ModelState, TrainConfig};

/// Seed of a client's local generator (mini-batch shuffling).
pub fn client_seed(experiment_seed: u64, client_id: &str) -> u64 {
    seed::derive(experiment_seed, &[seed::tag("client"), seed::tag(client_id)])
}

/// Seed of the DP noise a client adds in a given round.
pub fn dp_seed(experiment_seed: u64, round: u32, client_id: &str) -> u64 {
    seed::derive(experiment_seed, &[seed::tag("dp"), round as u64, seed::tag(client_id)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub metric_name: String,
    pub metric_value: f64,
    pub n_samples: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roc: Option<RocResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
}

/// Loss plus the task metric: MSE for regression, AUC with bootstrap CI and
/// confusion matrix for classification.
pub fn evaluate(state: &ModelState, data: &Dataset, n_boot: usize, boot_seed: u64) -> Result<EvalReport> {
    let loss = evaluate_loss(state, data)?;
    let scores = predict(state, data)?;
    match state.spec.task {
        TaskKind::Regression => Ok(EvalReport {
            loss,
            metric_name: "mse".into(),
            metric_value: metrics::mse(&scores, &data.targets)?,
            n_samples: data.len() as u64,
            roc: None,
            confusion: None,
        }),
        TaskKind::BinaryClassification => {
            let roc = metrics::roc_auc(&scores, &data.targets, n_boot, boot_seed)?;
            let confusion = metrics::confusion_matrix(&scores, &data.targets, roc.threshold);
            Ok(EvalReport {
                loss,
                metric_name: "auc".into(),
                metric_value: roc.auc,
                n_samples: data.len() as u64,
                roc: Some(roc),
                confusion: Some(confusion),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// What leaves the client: privatized when DP is on.
    pub outgoing: ModelSnapshot,
    /// The pre-noise update; never transmitted.
    pub raw: ModelSnapshot,
    pub n_samples: u64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// A client's persistent local state across the rounds of one experiment.
/// Optimizer moments, shuffle seed and epoch counter survive rounds; weights
/// and running statistics are replaced by each broadcast model.
#[derive(Debug, Clone, Default)]
pub struct ClientSession {
    state: Option<ModelState>,
}

impl ClientSession {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> Option<&ModelState> {
        self.state.as_ref()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn train_round(
        &mut self,
        spec: &ModelSpec,
        global: &ModelSnapshot,
        data: &SiteData,
        cfg: &TrainConfig,
        round: u32,
        dp: &DpConfig,
        experiment_seed: u64,
        client_id: &str,
    ) -> Result<TrainOutcome> {
        let mut state = match self.state.take() {
            Some(s) if s.spec == *spec => s,
            _ => ModelState::init(spec, client_seed(experiment_seed, client_id))?,
        };
        state.load_snapshot(global)?;
        let (trained, train_loss) = local_train(&state, &data.train, cfg, round)?;
        let val_loss = evaluate_loss(&trained, &data.val)?;
        let raw = trained.snapshot();
        let outgoing = if dp.enabled {
            ModelSnapshot { params: privatize_update(&raw.params, dp, dp_seed(experiment_seed, round, client_id))?, buffers: raw.buffers.clone() }
        } else {
            raw.clone()
        };
        self.state = Some(trained);
        Ok(TrainOutcome { outgoing, raw, n_samples: data.train.len() as u64, train_loss, val_loss })
    }
}

/// Weighted aggregate of client snapshots. Parameters always go through
/// quorum-checked FedAvg; running statistics are averaged with the same
/// weights when `aggregate_bn_stats`, else kept from `global`.
pub fn aggregate_snapshots(
    global: &ModelSnapshot,
    round: u32,
    registered: &[String],
    updates: &[(ClientUpdate, ModelSnapshot)],
    quorum: Quorum,
    aggregate_bn_stats: bool,
) -> Result<(ModelSnapshot, RoundResult)> {
    let plain: Vec<ClientUpdate> = updates.iter().map(|(u, _)| u.clone()).collect();
    let result = run_round(&global.params, round, registered, &plain, quorum)?;
    let buffers = if aggregate_bn_stats && !global.buffers.is_empty() {
        let mut sorted: Vec<&(ClientUpdate, ModelSnapshot)> = updates.iter().collect();
        sorted.sort_by(|a, b| a.0.client_id.cmp(&b.0.client_id));
        let terms: Vec<_> = sorted.iter().map(|(u, s)| (&s.buffers, u.n_samples)).collect();
        weighted_average(&terms)?
    } else {
        global.buffers.clone()
    };
    Ok((ModelSnapshot { params: result.global_params.clone(), buffers }, result))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub rounds: u32,
    pub seed: u64,
    #[serde(default)]
    pub dp: DpConfig,
    #[serde(default = "yes")]
    pub aggregate_bn_stats: bool,
}

fn yes() -> bool {
    true
}

pub struct FederationOutcome {
    pub initial: ModelSnapshot,
    pub global: ModelSnapshot,
    pub history: Vec<RoundResult>,
    pub sessions: BTreeMap<String, ClientSession>,
}

/// Synchronous FedAvg over in-memory sites, keyed by site id. A single site
/// is plain local training split into rounds.
pub fn run_federation(cfg: &FederationConfig, sites: &[SiteData]) -> Result<FederationOutcome> {
    if cfg.rounds == 0 {
        return Err(Error::Config("rounds must be at least 1".into()));
    }
    if sites.is_empty() {
        return Err(Error::Config("no sites".into()));
    }
    let initial = ModelState::init(&cfg.model, cfg.seed)?.snapshot();
    let registered: Vec<String> = sites.iter().map(|s| s.site_id.clone()).collect();
    let mut sessions: BTreeMap<String, ClientSession> = registered.iter().map(|id| (id.clone(), ClientSession::new())).collect();
    let mut global = initial.clone();
    let mut history = Vec::new();
    for round in 0..cfg.rounds {
        let mut updates = Vec::new();
        for site in sites {
            let session = sessions.get_mut(&site.site_id).unwrap();
            let out = session.train_round(&cfg.model, &global, site, &cfg.train, round, &cfg.dp, cfg.seed, &site.site_id)?;
            let update = ClientUpdate {
                client_id: site.site_id.clone(),
                round,
                params: out.outgoing.params.clone(),
                n_samples: out.n_samples,
                train_loss: out.train_loss,
            };
            updates.push((update, out.outgoing));
        }
        let (next, result) = aggregate_snapshots(&global, round, &registered, &updates, Quorum::FailFast, cfg.aggregate_bn_stats)?;
        global = next;
        history.push(result);
    }
    Ok(FederationOutcome { initial, global, history, sessions })
}

/// Fine-tunes the batch-normalization parameters of `global` on a site's
/// validation split.
pub fn personalize(spec: &ModelSpec, global: &ModelSnapshot, site: &SiteData, base: &TrainConfig, epochs: usize, seed_value: u64) -> Result<ModelState> {
    let state = ModelState::from_snapshot(spec, global, seed_value)?;
    finetune(&state, &site.val, base, epochs)
}
