//! FedAvg and the synchronous round rule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamVector;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: String,
    pub round: u32,
    pub params: ParamVector,
    pub n_samples: u64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    pub round: u32,
    pub global_params: ParamVector,
    pub per_client_losses: BTreeMap<String, f64>,
}

/// What to do when some registered clients did not report back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum Quorum {
    #[default]
    FailFast,
    MinK { k: usize },
}

/// Sample-count-weighted mean of equally shaped vectors. Terms are summed in
/// the order given.
pub fn weighted_average(vectors: &[(&ParamVector, u64)]) -> Result<ParamVector> {
    let (first, _) = vectors.first().ok_or_else(|| Error::Protocol("nothing to aggregate".into()))?;
    if vectors.iter().any(|(v, _)| !v.same_layout(first)) {
        return Err(Error::Protocol("parameter layouts differ between updates".into()));
    }
    if vectors.iter().any(|(_, n)| *n == 0) {
        return Err(Error::Protocol("every update must carry at least one sample".into()));
    }
    let total: u64 = vectors.iter().map(|(_, n)| n).sum();
    let mut acc = first.zeros_like();
    for (k, (v, n)) in vectors.iter().enumerate() {
        let frac = *n as f64 / total as f64;
        if k == 0 {
            // Seeding from the first product keeps a single update bit-exact (including -0.0).
            acc.values.iter_mut().zip(&v.values).for_each(|(a, x)| *a = frac * x);
        } else {
            acc.values.iter_mut().zip(&v.values).for_each(|(a, x)| *a += frac * x);
        }
    }
    Ok(acc)
}

/// FedAvg over one round's updates, summed in ascending `client_id` order.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(Error::Protocol("fedavg needs at least one update".into()));
    }
    let round = updates[0].round;
    if updates.iter().any(|u| u.round != round) {
        return Err(Error::Protocol("updates come from different rounds".into()));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Protocol("duplicate client update".into()));
    }
    let terms: Vec<_> = sorted.iter().map(|u| (&u.params, u.n_samples)).collect();
    weighted_average(&terms)
}

/// Aggregates one round, enforcing the quorum against the registered client
/// list.
pub fn run_round(
    global: &ParamVector,
    round: u32,
    registered: &[String],
    client_results: &[ClientUpdate],
    quorum: Quorum,
) -> Result<RoundResult> {
    if let Some(u) = client_results.iter().find(|u| u.round != round) {
        return Err(Error::Protocol(format!("update from {} is for round {} not {round}", u.client_id, u.round)));
    }
    if let Some(u) = client_results.iter().find(|u| !u.params.same_layout(global)) {
        return Err(Error::Protocol(format!("update from {} has a foreign layout", u.client_id)));
    }
    let missing: Vec<String> = registered
        .iter()
        .filter(|id| !client_results.iter().any(|u| &u.client_id == *id))
        .cloned()
        .collect();
    let enough = match quorum {
        Quorum::FailFast => missing.is_empty(),
        Quorum::MinK { k } => client_results.len() >= k.max(1),
    };
    if !enough {
        return Err(Error::Quorum { missing });
    }
    Ok(RoundResult {
        round,
        global_params: fedavg(client_results)?,
        per_client_losses: client_results.iter().map(|u| (u.client_id.clone(), u.train_loss)).collect(),
    })
}
