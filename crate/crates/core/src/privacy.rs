//! Output perturbation for client updates: element-wise clipping followed by
//! Laplace noise of scale `clip / epsilon` on every coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Laplace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub enabled: bool,
    pub epsilon: f64,
    pub clip: f64,
    pub mechanism: Mechanism,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self { enabled: false, epsilon: 0.1, clip: 1.0, mechanism: Mechanism::Laplace }
    }
}

impl DpConfig {
    pub fn laplace(epsilon: f64, clip: f64) -> Self {
        Self { enabled: true, epsilon, clip, mechanism: Mechanism::Laplace }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("dp.epsilon must be positive".into()));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(Error::Config("dp.clip must be positive".into()));
        }
        Ok(())
    }

    /// Per-coordinate Laplace scale.
    pub fn noise_scale(&self) -> f64 {
        self.clip / self.epsilon
    }
}

pub fn clip_update(update: &ParamVector, c: f64) -> ParamVector {
    let mut out = update.clone();
    out.values.iter_mut().for_each(|v| *v = v.clamp(-c, c));
    out
}

/// Inverse CDF of Laplace(0, scale) at `u` in (0, 1).
pub fn laplace_quantile(u: f64, scale: f64) -> f64 {
    let p = u - 0.5;
    -scale * p.signum() * (1.0 - 2.0 * p.abs()).ln()
}

pub fn laplace_cdf(x: f64, scale: f64) -> f64 {
    if x < 0.0 {
        0.5 * (x / scale).exp()
    } else {
        1.0 - 0.5 * (-x / scale).exp()
    }
}

fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// `n` i.i.d. Laplace(0, scale) draws, deterministic in `seed`.
pub fn sample_laplace(scale: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("Laplace scale must be positive, got {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| laplace_quantile(open_unit(&mut rng), scale)).collect())
}

/// Clips, then adds Laplace noise. Callers skip this when `dp.enabled` is
/// false.
pub fn privatize_update(update: &ParamVector, dp: &DpConfig, seed: u64) -> Result<ParamVector> {
    dp.validate()?;
    let mut out = clip_update(update, dp.clip);
    let noise = sample_laplace(dp.noise_scale(), out.len(), seed)?;
    for (v, n) in out.values.iter_mut().zip(noise) {
        *v += n;
    }
    Ok(out)
}

/// Two-sided Kolmogorov–Smirnov statistic of `samples` against a CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LayoutEntry;
    use proptest::prelude::*;

    fn pv(values: Vec<f64>) -> ParamVector {
        let n = values.len();
        ParamVector::new(values, vec![LayoutEntry { name: "W1".into(), offset: 0, shape: vec![n] }]).unwrap()
    }

    #[test]
    fn clamps_coordinates() {
        assert_eq!(clip_update(&pv(vec![0.5, -2.0, 3.0]), 1.0).values, vec![0.5, -1.0, 1.0]);
        let inside = pv(vec![0.25, -1.0, 1.0, 0.0]);
        assert_eq!(clip_update(&inside, 1.0), inside);
    }

    #[test]
    fn median_maps_to_zero() {
        assert_eq!(laplace_quantile(0.5, 3.0), 0.0);
        assert!((laplace_cdf(laplace_quantile(0.9, 2.0), 2.0) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_seeded() {
        assert_eq!(sample_laplace(1.0, 100, 5).unwrap(), sample_laplace(1.0, 100, 5).unwrap());
        assert_ne!(sample_laplace(1.0, 100, 5).unwrap(), sample_laplace(1.0, 100, 6).unwrap());
        assert!(matches!(sample_laplace(0.0, 3, 1), Err(Error::Config(_))));
        assert!(sample_laplace(-1.0, 3, 1).is_err());
    }

    #[test]
    fn moments_at_scale_ten() {
        let xs = sample_laplace(10.0, 1_000_000, 42).unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((var - 200.0).abs() < 0.02 * 200.0, "var {var}");
    }

    #[test]
    fn paper_setting_scale() {
        assert_eq!(DpConfig::laplace(0.1, 1.0).noise_scale(), 10.0);
    }

    #[test]
    fn smaller_epsilon_means_more_noise() {
        let zeros = pv(vec![0.0; 100_000]);
        let var = |eps: f64| {
            let out = privatize_update(&zeros, &DpConfig::laplace(eps, 1.0), 9).unwrap();
            out.values.iter().map(|v| v * v).sum::<f64>() / out.len() as f64
        };
        assert!(var(0.05) > var(0.1));
        assert!(var(0.1) > var(1.0));
    }

    #[test]
    fn noise_follows_laplace_law() {
        let x = pv((0..100_000).map(|i| ((i as f64) * 0.013).sin() * 3.0).collect());
        let dp = DpConfig::laplace(0.1, 1.0);
        let noisy = privatize_update(&x, &dp, 77).unwrap();
        let clipped = clip_update(&x, 1.0);
        let diff: Vec<f64> = noisy.values.iter().zip(&clipped.values).map(|(a, b)| a - b).collect();
        assert!(ks_statistic(&diff, |t| laplace_cdf(t, 10.0)) < 0.01);
        assert_eq!(noisy.layout, x.layout);
    }

    proptest! {
        #[test]
        fn clip_bounds_and_idempotence(values in prop::collection::vec(-1e6f64..1e6, 1..64), c in 0.01f64..10.0) {
            let once = clip_update(&pv(values), c);
            prop_assert!(once.values.iter().all(|v| v.abs() <= c));
            prop_assert_eq!(clip_update(&once, c), once);
        }

        #[test]
        fn privatize_deterministic(values in prop::collection::vec(-5f64..5.0, 1..32), seed: u64) {
            let dp = DpConfig::laplace(0.5, 1.0);
            prop_assert_eq!(privatize_update(&pv(values.clone()), &dp, seed).unwrap(), privatize_update(&pv(values), &dp, seed).unwrap());
        }
    }
}
