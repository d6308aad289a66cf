use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::model::{ModelState, ParamVector};
use crate::tensor::nn::{self, Mode, BN_MOMENTUM};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_FINETUNE_EPOCHS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr0: f64,
    pub lr_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable_mask: Option<BTreeSet<String>>,
}

impl Default for TrainConfig {
    /// Two local epochs of Adam at 0.003 decaying by 0.975 per round.
    fn default() -> Self {
        Self { local_epochs: 2, batch_size: 32, optimizer: OptimizerKind::Adam, lr0: 0.003, lr_decay: 0.975, trainable_mask: None }
    }
}

impl TrainConfig {
    pub fn validate(&self, params: &ParamVector) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config("lr0 must be a finite non-negative number".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must lie in (0, 1]".into()));
        }
        if let Some(mask) = &self.trainable_mask {
            if let Some(bad) = mask.iter().find(|n| params.entry(n).is_none()) {
                return Err(Error::Config(format!("trainable_mask names unknown parameter {bad}")));
            }
        }
        Ok(())
    }
}

/// `lr0 * decay^round`.
pub fn lr_schedule(lr0: f64, decay: f64, round: u32) -> f64 {
    lr0 * decay.powi(round as i32)
}

fn trainable_flags(params: &ParamVector, mask: &Option<BTreeSet<String>>) -> Vec<bool> {
    match mask {
        None => vec![true; params.len()],
        Some(names) => {
            let mut flags = vec![false; params.len()];
            for e in params.layout.iter().filter(|e| names.contains(&e.name)) {
                flags[e.range()].fill(true);
            }
            flags
        }
    }
}

fn update_running(state: &mut ModelState, stats: &[nn::BatchStats], batch_size: usize) {
    let correction = if batch_size > 1 { batch_size as f64 / (batch_size - 1) as f64 } else { 1.0 };
    for s in stats {
        if let Some(rs) = state.bn_running.iter_mut().find(|r| r.layer == s.layer) {
            for (r, m) in rs.mean.iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in rs.var.iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
            }
        }
    }
}

fn apply_step(state: &mut ModelState, grad: &ParamVector, lr: f64, kind: OptimizerKind, trainable: &[bool]) {
    match kind {
        OptimizerKind::Sgd => {
            for ((w, g), t) in state.params.values.iter_mut().zip(&grad.values).zip(trainable) {
                let step = lr * g;
                if *t && step != 0.0 {
                    *w -= step;
                }
            }
        }
        OptimizerKind::Adam => {
            let opt = &mut state.optimizer;
            if opt.m.len() != grad.len() {
                opt.m = vec![0.0; grad.len()];
                opt.v = vec![0.0; grad.len()];
            }
            opt.step += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(opt.step as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(opt.step as i32);
            for i in 0..grad.len() {
                if !trainable[i] {
                    continue;
                }
                let g = grad.values[i];
                opt.m[i] = ADAM_BETA1 * opt.m[i] + (1.0 - ADAM_BETA1) * g;
                opt.v[i] = ADAM_BETA2 * opt.v[i] + (1.0 - ADAM_BETA2) * g * g;
                let step = lr * (opt.m[i] / bc1) / ((opt.v[i] / bc2).sqrt() + ADAM_EPS);
                if step != 0.0 {
                    state.params.values[i] -= step;
                }
            }
        }
    }
}

/// Runs `cfg.local_epochs` epochs of shuffled mini-batch optimization at the
/// learning rate scheduled for `round`. Returns the new state and the
/// sample-weighted mean loss of the final epoch.
pub fn local_train(state: &ModelState, data: &Dataset, cfg: &TrainConfig, round: u32) -> Result<(ModelState, f64)> {
    if data.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    cfg.validate(&state.params)?;
    let lr = lr_schedule(cfg.lr0, cfg.lr_decay, round);
    let trainable = trainable_flags(&state.params, &cfg.trainable_mask);
    let mut next = state.clone();
    let mut last_loss = None;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.local_epochs {
        order.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(next.rng_seed, &[next.epochs_done]));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch(chunk);
            let (loss, grad, stats) = nn::loss_grad_stats(&next, &batch)?;
            total += loss * chunk.len() as f64;
            update_running(&mut next, &stats, chunk.len());
            apply_step(&mut next, &grad, lr, cfg.optimizer, &trainable);
        }
        next.epochs_done += 1;
        last_loss = Some(total / data.len() as f64);
    }
    let loss = match last_loss {
        Some(l) => l,
        None => evaluate_loss(&next, data)?,
    };
    Ok((next, loss))
}

/// Personalization: trains only the batch-normalization affine parameters.
pub fn finetune(state: &ModelState, tuning_data: &Dataset, base: &TrainConfig, epochs: usize) -> Result<ModelState> {
    let names = state.spec.bn_param_names();
    if names.is_empty() {
        return Err(Error::Config("model has no batch-normalization layers to fine-tune".into()));
    }
    if epochs == 0 {
        return Ok(state.clone());
    }
    let cfg = TrainConfig { local_epochs: epochs, trainable_mask: Some(names.into_iter().collect()), ..base.clone() };
    Ok(local_train(state, tuning_data, &cfg, 0)?.0)
}

/// Eval-mode batch-mean loss over a whole dataset.
pub fn evaluate_loss(state: &ModelState, data: &Dataset) -> Result<f64> {
    let (out, _) = nn::forward(state, &data.inputs, Mode::Eval)?;
    Ok(nn::loss_from_outputs(state.spec.task, &out, &data.targets))
}

/// Eval-mode scores: raw predictions for regression, probabilities for
/// classification.
pub fn predict(state: &ModelState, data: &Dataset) -> Result<Vec<f64>> {
    let (out, _) = nn::forward(state, &data.inputs, Mode::Eval)?;
    Ok(match state.spec.task {
        TaskKind::Regression => out,
        TaskKind::BinaryClassification => out.into_iter().map(nn::sigmoid).collect(),
    })
}
