//! Closed-form input gradient of the attack objective for one-hidden-layer
//! networks without batch normalization.
//!
//! For such a network the candidate's parameter gradient is
//! `delta * [u x^T, u, a, 1]` with `u = w2 * relu'(z)`, so the
//! cosine term depends on `delta` only through its sign and the gradient
//! needs no second derivative of the loss.

use crate::data::{Batch, Matrix};
use crate::error::Result;
use crate::inversion::attack::AttackConfig;
use crate::inversion::capture::CapturedGradient;
use crate::inversion::objective::attack_objective;
use crate::tensor::{loss_and_grad, Activation};

/// Whether `input_gradient` applies to the captured model.
pub fn supports_closed_form(captured: &CapturedGradient) -> bool {
    let spec = &captured.model.spec;
    spec.num_layers() == 2 && spec.bn_layers().is_empty() && spec.layer_sizes[2] == 1
}

fn tv_gradient(image: &Matrix, out: &mut [f64], weight: f64) {
    let cols = image.cols();
    let sign = |d: f64| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
    for r in 0..image.rows() {
        for c in 0..cols {
            let v = image.get(r, c);
            if c + 1 < cols {
                let s = sign(image.get(r, c + 1) - v) * weight;
                out[r * cols + c + 1] += s;
                out[r * cols + c] -= s;
            }
            if r + 1 < image.rows() {
                let s = sign(image.get(r + 1, c) - v) * weight;
                out[(r + 1) * cols + c] += s;
                out[r * cols + c] -= s;
            }
        }
    }
}

/// Objective value and its exact gradient with respect to the candidate.
/// Returns `None` when the model is outside the supported family.
pub fn input_gradient(candidate: &Matrix, captured: &CapturedGradient, cfg: &AttackConfig) -> Option<Result<(f64, Vec<f64>)>> {
    if !supports_closed_form(captured) {
        return None;
    }
    Some(closed_form(candidate, captured, cfg))
}

fn closed_form(candidate: &Matrix, captured: &CapturedGradient, cfg: &AttackConfig) -> Result<(f64, Vec<f64>)> {
    let f = attack_objective(candidate, captured, cfg)?;
    let state = &captured.model;
    let spec = &state.spec;
    let (d, h) = (spec.layer_sizes[0], spec.layer_sizes[1]);
    let x = candidate.as_slice();
    let w1 = state.params.slice("W1");
    let b1 = state.params.slice("b1");
    let w2 = state.params.slice("W2");
    let g = &captured.grad;
    let (gw1, gb1, gw2, gb2) = (g.slice("W1"), g.slice("b1"), g.slice("W2"), g.slice("b2")[0]);

    let mut z = vec![0.0; h];
    for (o, zo) in z.iter_mut().enumerate() {
        *zo = b1[o] + w1[o * d..(o + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
    let relu = spec.activation == Activation::Relu;
    let r: Vec<f64> = z.iter().map(|&v| if !relu || v > 0.0 { 1.0 } else { 0.0 }).collect();
    let a: Vec<f64> = z.iter().zip(&r).map(|(v, ri)| if relu { v * ri } else { *v }).collect();
    let u: Vec<f64> = w2.iter().zip(&r).map(|(w, ri)| w * ri).collect();

    // Sign of the output-layer error for the candidate.
    let input = Matrix::from_vec(1, d, x.to_vec())?;
    let label = captured.labels.as_ref().and_then(|l| l.first().copied()).unwrap_or(0.0);
    let (_, cand) = loss_and_grad(state, &Batch::new(input.clone(), vec![label])?)?;
    let delta = cand.slice("b2")[0];

    let mut grad = vec![0.0; d];
    if delta != 0.0 {
        let s = delta.signum();
        let gnorm = g.norm();
        // p = <g*, candidate grad> / delta
        let mut gw1_u = vec![0.0; d];
        let mut p = gb2;
        for o in 0..h {
            p += gw2[o] * a[o] + gb1[o] * u[o];
            let row = &gw1[o * d..(o + 1) * d];
            p += u[o] * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            if u[o] != 0.0 {
                for (acc, gv) in gw1_u.iter_mut().zip(row) {
                    *acc += u[o] * gv;
                }
            }
        }
        let a2: f64 = a.iter().map(|v| v * v).sum();
        let u2: f64 = u.iter().map(|v| v * v).sum();
        let x2: f64 = x.iter().map(|v| v * v).sum();
        let n = 1.0 + a2 + u2 * (1.0 + x2);
        let sqrt_n = n.sqrt();
        // d(-cos)/dx = -s/|g*| * (dp/sqrt(n) - p dn / (2 n^1.5))
        let c_p = -s / (gnorm * sqrt_n);
        let c_n = s * p / (2.0 * gnorm * n * sqrt_n);
        for o in 0..h {
            let coef = c_p * r[o] * gw2[o] + c_n * 2.0 * r[o] * a[o];
            if coef != 0.0 {
                for (gi, wv) in grad.iter_mut().zip(&w1[o * d..(o + 1) * d]) {
                    *gi += coef * wv;
                }
            }
        }
        for i in 0..d {
            grad[i] += c_p * gw1_u[i] + c_n * 2.0 * u2 * x[i];
        }
    }
    if cfg.tv_weight > 0.0 {
        tv_gradient(candidate, &mut grad, cfg.tv_weight);
    }
    Ok((f, grad))
}
