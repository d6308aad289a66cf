//! Forward pass and exact backpropagation for dense networks with optional
//! batch normalization after hidden affine layers.

use crate::data::{Batch, Matrix, TaskKind};
use crate::error::{Error, Result};
use crate::tensor::model::{Activation, ModelState, ParamVector};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-feature statistics of one batch-normalized layer's pre-activations.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    /// Biased (population) variance over the batch.
    pub var: Vec<f64>,
}

struct BnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

struct LayerCache {
    input: Matrix,
    bn: Option<BnCache>,
    /// Post-normalization, pre-activation values.
    pre_act: Matrix,
}

struct Trace {
    layers: Vec<LayerCache>,
    output: Vec<f64>,
    stats: Vec<BatchStats>,
}

fn check_finite(m: &[f64], layer: usize, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { layer, what: what.to_string() })
    }
}

fn run(state: &ModelState, inputs: &Matrix, mode: Mode) -> Result<Trace> {
    let spec = &state.spec;
    if inputs.cols() != spec.input_dim() {
        return Err(Error::Shape(format!("input width {} but model expects {}", inputs.cols(), spec.input_dim())));
    }
    let b = inputs.rows();
    let params = &state.params;
    let mut layers = Vec::with_capacity(spec.num_layers());
    let mut stats = Vec::new();
    let mut x = inputs.clone();
    for l in 1..=spec.num_layers() {
        let (fan_in, fan_out) = (spec.layer_sizes[l - 1], spec.layer_sizes[l]);
        let w = params.slice(&format!("W{l}"));
        let bias = params.slice(&format!("b{l}"));
        let mut z = Matrix::zeros(b, fan_out);
        for r in 0..b {
            let xr = x.row(r);
            let zr = z.row_mut(r);
            for (o, zo) in zr.iter_mut().enumerate() {
                let wrow = &w[o * fan_in..(o + 1) * fan_in];
                *zo = bias[o] + wrow.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        check_finite(z.as_slice(), l, "affine output")?;

        if l == spec.num_layers() {
            let output = z.as_slice().to_vec();
            layers.push(LayerCache { input: x, bn: None, pre_act: z });
            return Ok(Trace { layers, output, stats });
        }

        let mut bn_cache = None;
        let pre_act = if spec.has_bn(l) {
            let gamma = params.slice(&format!("gamma{l}"));
            let beta = params.slice(&format!("beta{l}"));
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut mean = vec![0.0; fan_out];
                    for r in 0..b {
                        for (m, v) in mean.iter_mut().zip(z.row(r)) {
                            *m += v;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= b as f64);
                    let mut var = vec![0.0; fan_out];
                    for r in 0..b {
                        for ((s, v), m) in var.iter_mut().zip(z.row(r)).zip(&mean) {
                            *s += (v - m) * (v - m);
                        }
                    }
                    var.iter_mut().for_each(|s| *s /= b as f64);
                    stats.push(BatchStats { layer: l, mean: mean.clone(), var: var.clone() });
                    (mean, var)
                }
                Mode::Eval => {
                    let rs = state
                        .running(l)
                        .ok_or_else(|| Error::Config(format!("missing running statistics for layer {l}")))?;
                    (rs.mean.clone(), rs.var.clone())
                }
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = Matrix::zeros(b, fan_out);
            let mut y = Matrix::zeros(b, fan_out);
            for r in 0..b {
                for o in 0..fan_out {
                    let h = (z.get(r, o) - mean[o]) * inv_std[o];
                    xhat.set(r, o, h);
                    y.set(r, o, gamma[o] * h + beta[o]);
                }
            }
            check_finite(y.as_slice(), l, "batch normalization")?;
            bn_cache = Some(BnCache { xhat, inv_std });
            y
        } else {
            z
        };

        let mut a = pre_act.clone();
        if spec.activation == Activation::Relu {
            a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        layers.push(LayerCache { input: x, bn: bn_cache, pre_act });
        x = a;
    }
    unreachable!("loop returns at the output layer")
}

/// Raw network outputs (the logit for classification) and, in train mode,
/// the batch statistics of every batch-normalized layer.
pub fn forward(state: &ModelState, inputs: &Matrix, mode: Mode) -> Result<(Vec<f64>, Vec<BatchStats>)> {
    let t = run(state, inputs, mode)?;
    Ok((t.output, t.stats))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Batch-mean loss of raw outputs: squared error for regression, binary
/// cross-entropy on the logistic link for classification.
pub fn loss_from_outputs(task: TaskKind, outputs: &[f64], targets: &[f64]) -> f64 {
    let n = outputs.len() as f64;
    let total: f64 = match task {
        TaskKind::Regression => outputs.iter().zip(targets).map(|(p, y)| (p - y) * (p - y)).sum(),
        TaskKind::BinaryClassification => outputs.iter().zip(targets).map(|(z, y)| softplus(*z) - y * z).sum(),
    };
    total / n
}

/// Batch-mean loss and its exact gradient with respect to every parameter,
/// computed with train-mode batch normalization. Does not touch running
/// statistics.
pub fn loss_and_grad(state: &ModelState, batch: &Batch) -> Result<(f64, ParamVector)> {
    let (loss, grad, _) = loss_grad_stats(state, batch)?;
    Ok((loss, grad))
}

pub(crate) fn loss_grad_stats(state: &ModelState, batch: &Batch) -> Result<(f64, ParamVector, Vec<BatchStats>)> {
    let b = batch.size();
    if b == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let spec = &state.spec;
    let trace = run(state, &batch.inputs, Mode::Train)?;
    let loss = loss_from_outputs(spec.task, &trace.output, &batch.targets);
    if !loss.is_finite() {
        return Err(Error::Numeric { layer: spec.num_layers(), what: "loss".into() });
    }
    let inv_b = 1.0 / b as f64;
    let mut delta: Vec<f64> = trace
        .output
        .iter()
        .zip(&batch.targets)
        .map(|(p, y)| match spec.task {
            TaskKind::Regression => 2.0 * (p - y) * inv_b,
            TaskKind::BinaryClassification => (sigmoid(*p) - y) * inv_b,
        })
        .collect();

    let params = &state.params;
    let mut grad = params.zeros_like();
    for l in (1..=spec.num_layers()).rev() {
        let (fan_in, fan_out) = (spec.layer_sizes[l - 1], spec.layer_sizes[l]);
        let cache = &trace.layers[l - 1];
        // `delta` holds dL/d(pre_act) for hidden layers and dL/dz at the output.
        if l < spec.num_layers() {
            if spec.activation == Activation::Relu {
                for (d, y) in delta.iter_mut().zip(cache.pre_act.as_slice()) {
                    if *y <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            if let Some(bn) = &cache.bn {
                let gamma = params.slice(&format!("gamma{l}"));
                let mut dgamma = vec![0.0; fan_out];
                let mut dbeta = vec![0.0; fan_out];
                for r in 0..b {
                    for o in 0..fan_out {
                        let d = delta[r * fan_out + o];
                        dgamma[o] += d * bn.xhat.get(r, o);
                        dbeta[o] += d;
                    }
                }
                // dL/dz = inv_std/b * (b*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat)), dxhat = d*gamma
                let mut dz = vec![0.0; b * fan_out];
                for o in 0..fan_out {
                    let sum_dx = dbeta[o] * gamma[o];
                    let sum_dx_xhat = dgamma[o] * gamma[o];
                    for r in 0..b {
                        let dxhat = delta[r * fan_out + o] * gamma[o];
                        dz[r * fan_out + o] =
                            bn.inv_std[o] * inv_b * (b as f64 * dxhat - sum_dx - bn.xhat.get(r, o) * sum_dx_xhat);
                    }
                }
                grad.slice_mut(&format!("gamma{l}")).copy_from_slice(&dgamma);
                grad.slice_mut(&format!("beta{l}")).copy_from_slice(&dbeta);
                delta = dz;
            }
        }

        let w = params.slice(&format!("W{l}"));
        {
            let gw = grad.slice_mut(&format!("W{l}"));
            for r in 0..b {
                let xr = cache.input.row(r);
                for o in 0..fan_out {
                    let d = delta[r * fan_out + o];
                    if d != 0.0 {
                        let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                        for (g, x) in row.iter_mut().zip(xr) {
                            *g += d * x;
                        }
                    }
                }
            }
        }
        {
            let gb = grad.slice_mut(&format!("b{l}"));
            for r in 0..b {
                for o in 0..fan_out {
                    gb[o] += delta[r * fan_out + o];
                }
            }
        }
        if l > 1 {
            let mut prev = vec![0.0; b * fan_in];
            for r in 0..b {
                let pr = &mut prev[r * fan_in..(r + 1) * fan_in];
                for o in 0..fan_out {
                    let d = delta[r * fan_out + o];
                    if d != 0.0 {
                        for (p, wv) in pr.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                            *p += d * wv;
                        }
                    }
                }
            }
            delta = prev;
        }
        check_finite(&grad.values, l, "gradient")?;
    }
    Ok((loss, grad, trace.stats))
}
