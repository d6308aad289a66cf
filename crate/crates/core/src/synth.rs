//! Seeded two-site (or n-site) synthetic datasets with controllable
//! distribution shift, standing in for private clinical data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Matrix, SiteData, TaskKind};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub site_id: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    /// Site mean offset; empty means no shift.
    #[serde(default)]
    pub shift: Vec<f64>,
    /// Regression label noise standard deviation.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Fraction of positives in every split (classification).
    #[serde(default = "default_rate")]
    pub positive_rate: f64,
}

fn default_noise() -> f64 {
    0.5
}

fn default_rate() -> f64 {
    0.5
}

impl SiteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Config(format!("site {}: split sizes must be at least 1", self.site_id)));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config(format!("site {}: feature_dim must be positive", self.site_id)));
        }
        if !self.shift.is_empty() && self.shift.len() != self.feature_dim {
            return Err(Error::Config(format!("site {}: shift length must equal feature_dim", self.site_id)));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(Error::Config(format!("site {}: positive_rate must lie in (0, 1)", self.site_id)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("site {}: noise_sigma must be non-negative", self.site_id)));
        }
        Ok(())
    }

    fn shift_at(&self, j: usize) -> f64 {
        self.shift.get(j).copied().unwrap_or(0.0)
    }
}

/// Shared generator knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Weight of the quadratic term in the regression target.
    #[serde(default = "default_nonlinearity")]
    pub nonlinearity: f64,
    /// Distance between class means (classification).
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// 0: all sites share the discriminative direction; 1: each site draws
    /// its own.
    #[serde(default = "default_direction_mix")]
    pub direction_mix: f64,
}

fn default_nonlinearity() -> f64 {
    1.0
}

fn default_separation() -> f64 {
    2.0
}

fn default_direction_mix() -> f64 {
    0.0
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { nonlinearity: default_nonlinearity(), separation: default_separation(), direction_mix: default_direction_mix() }
    }
}

/// Data-generation file: `{"task": ..., "sites": [...], "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task: TaskKind,
    pub sites: Vec<SiteSpec>,
    #[serde(default)]
    pub params: SynthParams,
}

impl SynthSpec {
    pub fn generate(&self, seed: u64) -> Result<Vec<SiteData>> {
        match self.task {
            TaskKind::Regression => gen_regression_sites(&self.sites, &self.params, seed),
            TaskKind::BinaryClassification => gen_classification_sites(&self.sites, &self.params, seed),
        }
    }
}

fn check_sites(specs: &[SiteSpec]) -> Result<usize> {
    let first = specs.first().ok_or_else(|| Error::Config("at least one site is required".into()))?;
    for s in specs {
        s.validate()?;
        if s.feature_dim != first.feature_dim {
            return Err(Error::Config("all sites must share feature_dim".into()));
        }
    }
    Ok(first.feature_dim)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn split(site: &SiteSpec, task: TaskKind, inputs: Vec<f64>, targets: Vec<f64>) -> Result<SiteData> {
    let d = site.feature_dim;
    let all = Dataset::new(Matrix::from_vec(targets.len(), d, inputs)?, targets)?;
    let idx: Vec<usize> = (0..all.len()).collect();
    let (train, rest) = idx.split_at(site.n_train);
    let (val, test) = rest.split_at(site.n_val);
    Ok(SiteData { site_id: site.site_id.clone(), task, train: all.subset(train), val: all.subset(val), test: all.subset(test) })
}

/// Features ~ N(shift, I); target = w*.x + nonlinearity * mean_j(x_j^2) + noise,
/// with one w* shared by every site.
pub fn gen_regression_sites(specs: &[SiteSpec], params: &SynthParams, seed: u64) -> Result<Vec<SiteData>> {
    let d = check_sites(specs)?;
    let mut wrng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[seed::tag("w*")]));
    let w: Vec<f64> = gaussian_vec(&mut wrng, d).into_iter().map(|v| v / (d as f64).sqrt()).collect();
    specs
        .iter()
        .enumerate()
        .map(|(k, site)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[k as u64, seed::tag(&site.site_id)]));
            let n = site.n_train + site.n_val + site.n_test;
            let mut inputs = Vec::with_capacity(n * d);
            let mut targets = Vec::with_capacity(n);
            for _ in 0..n {
                let x: Vec<f64> = (0..d).map(|j| site.shift_at(j) + rng.sample::<f64, _>(StandardNormal)).collect();
                let quad = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
                let lin: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
                let noise: f64 = rng.sample(StandardNormal);
                targets.push(lin + params.nonlinearity * quad + site.noise_sigma * noise);
                inputs.extend(x);
            }
            split(site, TaskKind::Regression, inputs, targets)
        })
        .collect()
}

/// Discriminative direction used for each site, exposed for Bayes-optimal
/// scoring in tests and reports.
pub fn class_directions(specs: &[SiteSpec], params: &SynthParams, seed: u64) -> Result<Vec<Vec<f64>>> {
    let d = check_sites(specs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[seed::tag("directions")]));
    let shared = unit(gaussian_vec(&mut rng, d));
    Ok(specs
        .iter()
        .map(|_| {
            let own = unit(gaussian_vec(&mut rng, d));
            let m = params.direction_mix.clamp(0.0, 1.0);
            unit(shared.iter().zip(&own).map(|(s, o)| (1.0 - m) * s + m * o).collect())
        })
        .collect())
}

/// Class-conditional Gaussians: x | y ~ N(shift + (2y - 1) * separation/2 * u_site, I),
/// with exactly round(rate * n) positives in every split.
pub fn gen_classification_sites(specs: &[SiteSpec], params: &SynthParams, seed: u64) -> Result<Vec<SiteData>> {
    let d = check_sites(specs)?;
    let dirs = class_directions(specs, params, seed)?;
    specs
        .iter()
        .zip(dirs)
        .enumerate()
        .map(|(k, (site, u))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[k as u64, seed::tag(&site.site_id)]));
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            for n in [site.n_train, site.n_val, site.n_test] {
                let pos = ((site.positive_rate * n as f64).round() as usize).min(n);
                let mut labels: Vec<f64> = (0..n).map(|i| if i < pos { 1.0 } else { 0.0 }).collect();
                labels.shuffle(&mut rng);
                for y in labels {
                    let sign = 2.0 * y - 1.0;
                    inputs.extend(
                        (0..d).map(|j| site.shift_at(j) + sign * params.separation / 2.0 * u[j] + rng.sample::<f64, _>(StandardNormal)),
                    );
                    targets.push(y);
                }
            }
            split(site, TaskKind::BinaryClassification, inputs, targets)
        })
        .collect()
}

fn scaled(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

/// Two regression sites sized like the ECG study's splits, scaled down.
pub fn table1_sites(scale: f64, feature_dim: usize, shift: f64) -> Vec<SiteSpec> {
    [("anl", 64518, 7905, 7905, 0.0), ("broad", 33140, 4143, 4143, shift)]
        .into_iter()
        .map(|(id, tr, va, te, s)| SiteSpec {
            site_id: id.into(),
            n_train: scaled(tr, scale),
            n_val: scaled(va, scale),
            n_test: scaled(te, scale),
            feature_dim,
            shift: vec![s; feature_dim],
            noise_sigma: default_noise(),
            positive_rate: default_rate(),
        })
        .collect()
}

/// Two classification sites with the chest-radiograph study's split sizes
/// (scaled) and positive rates 0.43 / 0.11.
pub fn table2_sites(scale: f64, feature_dim: usize, shift: f64) -> Vec<SiteSpec> {
    [("midrc", 9867, 2056, 2081, 0.43, 0.0), ("uchicago", 26047, 5569, 5619, 0.11, shift)]
        .into_iter()
        .map(|(id, tr, va, te, rate, s)| SiteSpec {
            site_id: id.into(),
            n_train: scaled(tr, scale),
            n_val: scaled(va, scale),
            n_test: scaled(te, scale),
            feature_dim,
            shift: vec![s; feature_dim],
            noise_sigma: default_noise(),
            positive_rate: rate,
        })
        .collect()
}
