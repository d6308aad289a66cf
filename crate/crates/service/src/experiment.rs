//! Experiment configuration, its validation, the lifecycle state machine and
//! the payloads carried by fabric tasks.

use std::collections::{BTreeMap, BTreeSet};

use fedx_core::aggregation::Quorum;
use fedx_core::blob::BlobRef;
use fedx_core::federation::EvalReport;
use fedx_core::metrics::weighted_mean;
use fedx_core::privacy::DpConfig;
use fedx_core::tensor::{ModelSpec, ModelState, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::FieldError;
use crate::fabric::EndpointRecord;
use crate::identity::Roster;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientEntry {
    pub client_id: String,
    pub endpoint_id: String,
    pub dataset_ref: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    #[default]
    Fedavg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineTune {
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Assigned by the server when empty.
    #[serde(default)]
    pub experiment_id: String,
    pub group_id: String,
    pub clients: Vec<ClientEntry>,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub rounds: u32,
    #[serde(default)]
    pub aggregator: Aggregator,
    #[serde(default)]
    pub dp: DpConfig,
    #[serde(default)]
    pub quorum: Quorum,
    #[serde(default)]
    pub cross_site: bool,
    #[serde(default)]
    pub fine_tune: Option<FineTune>,
    /// Seeds the initial global model, client shuffles and DP noise.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub aggregate_bn_stats: bool,
    /// Bootstrap resamples for AUC intervals in cross-site evaluation.
    #[serde(default = "default_n_boot")]
    pub n_boot: usize,
}

fn yes() -> bool {
    true
}

fn default_n_boot() -> usize {
    200
}

fn is_safe_id(s: &str) -> bool {
    !s.is_empty() && s.len() <= 128 && s.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.')) && !s.starts_with('.')
}

/// Every violated field, not just the first.
pub fn validate_config(cfg: &ExperimentConfig, roster: &Roster, endpoint: &dyn Fn(&str) -> Option<EndpointRecord>) -> Vec<FieldError> {
    let mut errs = Vec::new();
    if !cfg.experiment_id.is_empty() && !is_safe_id(&cfg.experiment_id) {
        errs.push(FieldError::new("experiment_id", "use letters, digits, '-', '_' or '.'"));
    }
    let group = roster.group(&cfg.group_id);
    if group.is_none() {
        errs.push(FieldError::new("group_id", format!("unknown group {}", cfg.group_id)));
    }
    if cfg.rounds < 1 {
        errs.push(FieldError::new("rounds", "must be at least 1"));
    }
    if cfg.clients.is_empty() {
        errs.push(FieldError::new("clients", "must be nonempty"));
    }
    let mut ids = BTreeSet::new();
    for (i, c) in cfg.clients.iter().enumerate() {
        if !is_safe_id(&c.client_id) {
            errs.push(FieldError::new(format!("clients[{i}].client_id"), "use letters, digits, '-', '_' or '.'"));
        } else if !ids.insert(c.client_id.as_str()) {
            errs.push(FieldError::new(format!("clients[{i}].client_id"), format!("duplicate client {}", c.client_id)));
        }
        if c.dataset_ref.is_empty() {
            errs.push(FieldError::new(format!("clients[{i}].dataset_ref"), "must be nonempty"));
        }
        match endpoint(&c.endpoint_id) {
            None => errs.push(FieldError::new(format!("clients[{i}].endpoint_id"), format!("endpoint {} is not registered", c.endpoint_id))),
            Some(rec) => {
                if let Some(g) = group {
                    if !g.members.contains_key(&rec.owner) {
                        errs.push(FieldError::new(
                            format!("clients[{i}].endpoint_id"),
                            format!("endpoint {} belongs to {}, who is not in group {}", c.endpoint_id, rec.owner, g.group_id),
                        ));
                    }
                }
            }
        }
    }
    match cfg.model.validate() {
        Err(e) => errs.push(FieldError::new("model", e.to_string())),
        Ok(()) => {
            if let Ok(state) = ModelState::init(&cfg.model, cfg.seed) {
                if let Err(e) = cfg.train.validate(&state.params) {
                    errs.push(FieldError::new("train", e.to_string()));
                }
            }
        }
    }
    if cfg.train.local_epochs < 1 {
        errs.push(FieldError::new("train.local_epochs", "must be at least 1"));
    }
    if cfg.dp.enabled {
        if let Err(e) = cfg.dp.validate() {
            errs.push(FieldError::new("dp", e.to_string()));
        }
    }
    if let Quorum::MinK { k } = cfg.quorum {
        if k < 1 || k > cfg.clients.len() {
            errs.push(FieldError::new("quorum.k", format!("must lie in 1..={}", cfg.clients.len())));
        }
    }
    if let Some(ft) = cfg.fine_tune {
        if ft.epochs < 1 {
            errs.push(FieldError::new("fine_tune.epochs", "must be at least 1"));
        }
    }
    errs
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    Created,
    ClientsReady,
    Running { round: u32 },
    CrossSite,
    Completed,
    Failed { reason: String },
}

impl Phase {
    pub fn is_terminal(&self) -> bool {
        matches!(self, Phase::Completed | Phase::Failed { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    ClientsOnline,
    BeginTraining,
    RoundDone,
    CrossSiteDone,
    Fail(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IllegalTransition {
    pub from: Phase,
    pub event: Event,
}

/// The lifecycle: created → clients_ready → running(0..R-1) → [cross_site]
/// → completed, or failed from any non-terminal phase.
pub fn transition(phase: &Phase, event: &Event, rounds: u32, cross_site: bool) -> Result<Phase, IllegalTransition> {
    let next = match (phase, event) {
        (p, Event::Fail(reason)) if !p.is_terminal() => Phase::Failed { reason: reason.clone() },
        (Phase::Created, Event::ClientsOnline) => Phase::ClientsReady,
        (Phase::ClientsReady, Event::BeginTraining) if rounds > 0 => Phase::Running { round: 0 },
        (Phase::Running { round }, Event::RoundDone) if round + 1 < rounds => Phase::Running { round: round + 1 },
        (Phase::Running { .. }, Event::RoundDone) if cross_site => Phase::CrossSite,
        (Phase::Running { .. }, Event::RoundDone) => Phase::Completed,
        (Phase::CrossSite, Event::CrossSiteDone) => Phase::Completed,
        _ => return Err(IllegalTransition { from: phase.clone(), event: event.clone() }),
    };
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub global: BlobRef,
    pub participants: Vec<String>,
    pub per_client_losses: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentView {
    pub experiment_id: String,
    pub group_id: String,
    pub owner: String,
    #[serde(flatten)]
    pub phase: Phase,
    pub started: bool,
    pub initial_global: BlobRef,
    pub current_global: BlobRef,
    pub history: Vec<RoundRecord>,
    pub created_at: String,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSiteModel {
    pub name: String,
    pub blob: BlobRef,
    /// Fine-tune the BN parameters on each client's validation split before
    /// evaluating.
    #[serde(default)]
    pub fine_tune: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSiteCell {
    pub client_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSiteRow {
    pub model: String,
    pub cells: Vec<CrossSiteCell>,
    /// Test-sample-weighted mean of the metric over the cells that
    /// succeeded; absent when none did.
    pub weighted_average: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSiteMatrix {
    pub clients: Vec<String>,
    pub rows: Vec<CrossSiteRow>,
}

impl CrossSiteMatrix {
    pub fn cell(&self, model: &str, client_id: &str) -> Option<&EvalReport> {
        let row = self.rows.iter().find(|r| r.model == model)?;
        row.cells.iter().find(|c| c.client_id == client_id)?.report.as_ref()
    }
}

pub fn weighted_column(cells: &[CrossSiteCell]) -> Option<f64> {
    let ok: Vec<&EvalReport> = cells.iter().filter_map(|c| c.report.as_ref()).collect();
    let values: Vec<f64> = ok.iter().map(|r| r.metric_value).collect();
    let weights: Vec<f64> = ok.iter().map(|r| r.n_samples as f64).collect();
    weighted_mean(&values, &weights).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTask {
    pub experiment_id: String,
    pub client_id: String,
    pub dataset_ref: String,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub dp: DpConfig,
    pub seed: u64,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub n_samples: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric_name: String,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneTask {
    pub epochs: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub experiment_id: String,
    pub client_id: String,
    pub dataset_ref: String,
    pub model: ModelSpec,
    #[serde(default)]
    pub fine_tune: Option<FineTuneTask>,
    pub n_boot: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureTask {
    pub dataset_ref: String,
    pub model: ModelSpec,
    pub batch_size: usize,
    #[serde(default)]
    pub dp: Option<DpConfig>,
    pub seed: u64,
}
