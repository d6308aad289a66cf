//! Evaluation metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{Error, Result};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const DEFAULT_BOOTSTRAP: usize = 1000;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(Error::Shape("mse of empty vectors".into()));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// Peak signal-to-noise ratio in dB. Without an explicit `range` the ground
/// truth's dynamic range (max - min) is used.
pub fn psnr(reconstruction: &Matrix, ground_truth: &Matrix, range: Option<f64>) -> Result<f64> {
    if reconstruction.rows() != ground_truth.rows() || reconstruction.cols() != ground_truth.cols() {
        return Err(Error::Shape("reconstruction and ground truth differ in shape".into()));
    }
    let range = range.unwrap_or_else(|| {
        let v = ground_truth.as_slice();
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
    });
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::Config("PSNR needs a positive data range".into()));
    }
    let err = mse(reconstruction.as_slice(), ground_truth.as_slice())?;
    Ok(psnr_from_mse(err, range))
}

pub fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (range * range / mse).log10()).min(PSNR_CAP_DB)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// Scores at or above `threshold` are classed positive.
pub fn confusion_matrix(scores: &[f64], labels: &[f64], threshold: f64) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (s, y) in scores.iter().zip(labels) {
        match (*s >= threshold, *y > 0.5) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    cm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub roc_points: Vec<(f64, f64)>,
    pub threshold: f64,
}

fn class_counts(labels: &[f64]) -> (usize, usize) {
    let pos = labels.iter().filter(|y| **y > 0.5).count();
    (pos, labels.len() - pos)
}

/// Mann–Whitney AUC with ties counted one half, via mid-ranks.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| labels[k] > 0.5).count() as f64 * mid_rank;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC vertices (fpr, tpr), one per distinct score taken as threshold from
/// high to low, starting at (0, 0).
pub fn roc_curve(scores: &[f64], labels: &[f64]) -> Vec<(f64, f64)> {
    let (pos, neg) = class_counts(labels);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] > 0.5 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg.max(1) as f64, tp as f64 / pos.max(1) as f64));
    }
    points
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// AUC with a seeded percentile-bootstrap 95% interval. Resamples that draw a
/// single class are redrawn. The interval is widened to contain the point
/// estimate when the percentile interval misses it.
pub fn roc_auc(scores: &[f64], labels: &[f64], n_boot: usize, seed: u64) -> Result<RocResult> {
    let point = auc(scores, labels)?;
    let n = scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boots = Vec::with_capacity(n_boot);
    let mut s = vec![0.0; n];
    let mut l = vec![0.0; n];
    while boots.len() < n_boot {
        for k in 0..n {
            let i = rng.random_range(0..n);
            s[k] = scores[i];
            l[k] = labels[i];
        }
        if let Ok(a) = auc(&s, &l) {
            boots.push(a);
        }
    }
    let (ci_low, ci_high) = if boots.is_empty() {
        (point, point)
    } else {
        boots.sort_by(f64::total_cmp);
        (percentile(&boots, 0.025).min(point), percentile(&boots, 0.975).max(point))
    };
    Ok(RocResult { auc: point, ci_low, ci_high, roc_points: roc_curve(scores, labels), threshold: DEFAULT_THRESHOLD })
}

/// `sum(w_i v_i) / sum(w_i)`.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.len() != weights.len() {
        return Err(Error::Shape(format!("{} values but {} weights", values.len(), weights.len())));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Config("weights must be non-negative with a positive sum".into()));
    }
    Ok(values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total)
}
