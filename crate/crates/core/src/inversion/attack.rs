use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::inversion::capture::CapturedGradient;
use crate::inversion::input_grad::input_gradient;
use crate::inversion::objective::attack_objective;
use crate::metrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackInit {
    Gaussian,
    Uniform,
    /// Start from `AttackConfig::init_image`, an average of images the
    /// attacker holds.
    DatasetMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackOptimizer {
    Adam,
    Adamw,
}

/// How the objective gradient is obtained. `Auto` uses the closed form when
/// the model allows it and finite differences otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientRoute {
    #[default]
    Auto,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub init: AttackInit,
    pub steps: usize,
    pub optimizer: AttackOptimizer,
    pub lr: f64,
    pub tv_weight: f64,
    pub bn_weight: f64,
    pub seed: u64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub gradient: GradientRoute,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_image: Option<Vec<f64>>,
}

fn default_weight_decay() -> f64 {
    0.01
}

fn default_fd_step() -> f64 {
    1e-4
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            init: AttackInit::Uniform,
            steps: 300,
            optimizer: AttackOptimizer::Adam,
            lr: 0.05,
            tv_weight: 1e-4,
            bn_weight: 1e-3,
            seed: 0,
            weight_decay: default_weight_decay(),
            fd_step: default_fd_step(),
            gradient: GradientRoute::Auto,
            init_image: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        if self.tv_weight < 0.0 || self.bn_weight < 0.0 {
            return Err(Error::Config("penalty weights must be non-negative".into()));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::Config("fd_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub image: Matrix,
    pub objective_trace: Vec<f64>,
    pub mse: Option<f64>,
    pub psnr_db: Option<f64>,
}

/// Square image shape for `dim` inputs when possible, otherwise one row.
pub fn image_shape(dim: usize) -> (usize, usize) {
    let side = (dim as f64).sqrt().round() as usize;
    if side * side == dim {
        (side, side)
    } else {
        (1, dim)
    }
}

/// Central finite-difference gradient of the objective over every input
/// coordinate. Returns the objective at `x` as well.
pub fn objective_gradient(candidate: &Matrix, captured: &CapturedGradient, cfg: &AttackConfig) -> Result<(f64, Vec<f64>)> {
    let h = cfg.fd_step;
    let f0 = attack_objective(candidate, captured, cfg)?;
    let mut probe = candidate.clone();
    let mut grad = vec![0.0; candidate.as_slice().len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = attack_objective(&probe, captured, cfg)?;
        probe.as_mut_slice()[i] = orig - h;
        let down = attack_objective(&probe, captured, cfg)?;
        probe.as_mut_slice()[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    Ok((f0, grad))
}

fn initial_candidate(shape: (usize, usize), cfg: &AttackConfig) -> Result<Matrix> {
    let n = shape.0 * shape.1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let values = match cfg.init {
        AttackInit::Gaussian => (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        AttackInit::Uniform => (0..n).map(|_| rng.random::<f64>()).collect(),
        AttackInit::DatasetMean => {
            let img = cfg
                .init_image
                .clone()
                .ok_or_else(|| Error::Config("dataset_mean init needs init_image".into()))?;
            if img.len() != n {
                return Err(Error::Shape(format!("init_image has {} values, expected {n}", img.len())));
            }
            img
        }
    };
    Matrix::from_vec(shape.0, shape.1, values)
}

/// Learning-rate multiplier: divided by ten at 3/8, 5/8 and 7/8 of the run.
fn step_decay(step: usize, total: usize) -> f64 {
    let passed = [3, 5, 7].iter().filter(|&&k| step * 8 >= total * k).count();
    0.1f64.powi(passed as i32)
}

/// Iteratively reshapes a placeholder image until its gradient matches the
/// captured one. Each step applies one Adam/AdamW update driven by the
/// finite-difference objective gradient; the trace records the objective
/// before every update.
pub fn run_attack(captured: &CapturedGradient, truth: Option<&Matrix>, cfg: &AttackConfig) -> Result<Reconstruction> {
    cfg.validate()?;
    let dim = captured.model.spec.input_dim();
    let shape = match truth {
        Some(t) if t.rows() * t.cols() == dim => (t.rows(), t.cols()),
        Some(_) => return Err(Error::Shape("ground truth does not match model input".into())),
        None => image_shape(dim),
    };
    let mut x = initial_candidate(shape, cfg)?;
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; dim];
    let mut v = vec![0.0; dim];
    let mut trace = Vec::with_capacity(cfg.steps);
    for t in 1..=cfg.steps {
        let (f, g) = match cfg.gradient {
            GradientRoute::Auto => match input_gradient(&x, captured, cfg) {
                Some(r) => r?,
                None => objective_gradient(&x, captured, cfg)?,
            },
            GradientRoute::FiniteDifference => objective_gradient(&x, captured, cfg)?,
        };
        trace.push(f);
        let lr = cfg.lr * step_decay(t - 1, cfg.steps);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for (i, xi) in x.as_mut_slice().iter_mut().enumerate() {
            if cfg.optimizer == AttackOptimizer::Adamw {
                *xi -= lr * cfg.weight_decay * *xi;
            }
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            *xi -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
        }
    }
    let (mse, psnr_db) = match truth {
        Some(t) => (Some(metrics::mse(x.as_slice(), t.as_slice())?), Some(metrics::psnr(&x, t, None)?)),
        None => (None, None),
    };
    Ok(Reconstruction { image: x, objective_trace: trace, mse, psnr_db })
}

/// Every combination of the listed settings, best final objective first.
/// Ranking uses only what an attacker can observe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackGrid {
    pub inits: Vec<AttackInit>,
    pub tv_weights: Vec<f64>,
    pub bn_weights: Vec<f64>,
    pub optimizers: Vec<AttackOptimizer>,
}

pub fn grid_search(
    captured: &CapturedGradient,
    truth: Option<&Matrix>,
    base: &AttackConfig,
    grid: &AttackGrid,
) -> Result<Vec<(AttackConfig, Reconstruction)>> {
    let mut out = Vec::new();
    for &init in &grid.inits {
        for &tv_weight in &grid.tv_weights {
            for &bn_weight in &grid.bn_weights {
                for &optimizer in &grid.optimizers {
                    let cfg = AttackConfig { init, tv_weight, bn_weight, optimizer, ..base.clone() };
                    let rec = run_attack(captured, truth, &cfg)?;
                    out.push((cfg, rec));
                }
            }
        }
    }
    let last = |r: &Reconstruction| r.objective_trace.last().copied().unwrap_or(f64::INFINITY);
    out.sort_by(|a, b| last(&a.1).total_cmp(&last(&b.1)));
    Ok(out)
}
