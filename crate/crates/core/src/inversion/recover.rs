use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::inversion::attack::image_shape;
use crate::inversion::capture::CapturedGradient;

/// Closed-form input recovery for a single-sample capture. With
/// `dW1 = delta (x) x` and `db1 = delta`, any row with a non-zero bias
/// gradient yields `x = dW1[i, :] / db1[i]`; the largest-magnitude row is
/// used. Exact only without DP noise.
pub fn recover_first_layer(captured: &CapturedGradient) -> Result<Matrix> {
    let spec = &captured.model.spec;
    let fan_in = spec.layer_sizes[0];
    let gw = captured.grad.get("W1").ok_or_else(|| Error::Recovery("no first-layer weights".into()))?;
    let gb = captured.grad.get("b1").ok_or_else(|| Error::Recovery("no first-layer bias".into()))?;
    let (i, db) = gb
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, v)| *v != 0.0)
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .ok_or_else(|| Error::Recovery("every first-layer bias gradient is zero".into()))?;
    let row: Vec<f64> = gw[i * fan_in..(i + 1) * fan_in].iter().map(|g| g / db).collect();
    let (r, c) = image_shape(fan_in);
    Matrix::from_vec(r, c, row)
}
