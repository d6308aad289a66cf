use crate::data::{Batch, Matrix};
use crate::error::{Error, Result};
use crate::inversion::attack::AttackConfig;
use crate::inversion::capture::CapturedGradient;
use crate::tensor::{BatchStats, ModelState};

/// Anisotropic total variation: sum of absolute horizontal and vertical
/// neighbour differences.
pub fn total_variation(image: &Matrix) -> f64 {
    let mut tv = 0.0;
    for r in 0..image.rows() {
        for c in 0..image.cols() {
            let v = image.get(r, c);
            if c + 1 < image.cols() {
                tv += (image.get(r, c + 1) - v).abs();
            }
            if r + 1 < image.rows() {
                tv += (image.get(r + 1, c) - v).abs();
            }
        }
    }
    tv
}

/// Squared distance between candidate batch statistics and the model's
/// running statistics, summed over batch-normalized layers.
pub fn bn_penalty(state: &ModelState, candidate_stats: &[BatchStats]) -> Result<f64> {
    if state.bn_running.is_empty() {
        return Err(Error::Config("model has no batch-normalization layers".into()));
    }
    let mut total = 0.0;
    for s in candidate_stats {
        let rs = state
            .running(s.layer)
            .ok_or_else(|| Error::Config(format!("layer {} has no running statistics", s.layer)))?;
        total += s.mean.iter().zip(&rs.mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        total += s.var.iter().zip(&rs.var).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Gradient-matching objective for one candidate input:
/// `1 - cos(grad(candidate), captured) + tv_weight * TV + bn_weight * BN`.
/// The BN term is only present for models with batch normalization.
pub fn attack_objective(candidate: &Matrix, captured: &CapturedGradient, cfg: &AttackConfig) -> Result<f64> {
    let label = captured
        .labels
        .as_ref()
        .and_then(|l| l.first().copied())
        .ok_or_else(|| Error::Objective("the attack needs the target label".into()))?;
    let captured_norm = captured.grad.norm();
    if captured_norm == 0.0 || !captured_norm.is_finite() {
        return Err(Error::Objective("captured gradient has zero norm".into()));
    }
    let input = Matrix::from_vec(1, candidate.rows() * candidate.cols(), candidate.as_slice().to_vec())?;
    let batch = Batch::new(input, vec![label])?;
    let (_, grad, stats) = crate::tensor::loss_grad_stats(&captured.model, &batch)?;
    let mut value = 1.0 - cosine_similarity(&grad.values, &captured.grad.values);
    if cfg.tv_weight > 0.0 {
        value += cfg.tv_weight * total_variation(candidate);
    }
    if cfg.bn_weight > 0.0 && !captured.model.bn_running.is_empty() {
        value += cfg.bn_weight * bn_penalty(&captured.model, &stats)?;
    }
    Ok(value)
}
