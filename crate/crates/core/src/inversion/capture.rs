use serde::{Deserialize, Serialize};

use crate::blob::BlobRef;
use crate::codec;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::privacy::{privatize_update, DpConfig};
use crate::tensor::{loss_and_grad, ModelSnapshot, ModelSpec, ModelState, ParamVector};

/// What an eavesdropper on the update channel holds: the broadcast model and
/// the gradient a client sent back.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedGradient {
    pub model: ModelState,
    pub model_blob: BlobRef,
    pub grad: ParamVector,
    pub batch_size: usize,
    /// Batch labels in order; `None` when the attacker does not know them.
    pub labels: Option<Vec<f64>>,
    pub dp_applied: Option<DpConfig>,
}

/// Batch-mean gradient of `batch` at `state`, optionally privatized before
/// the attacker sees it.
pub fn capture_gradient(state: &ModelState, batch: &Batch, dp: Option<&DpConfig>, seed: u64) -> Result<CapturedGradient> {
    if batch.size() == 0 {
        return Err(Error::Config("cannot capture the gradient of an empty batch".into()));
    }
    let (_, mut grad) = loss_and_grad(state, batch)?;
    let dp_applied = match dp {
        Some(cfg) if cfg.enabled => {
            grad = privatize_update(&grad, cfg, seed)?;
            Some(cfg.clone())
        }
        _ => None,
    };
    Ok(CapturedGradient {
        model: state.clone(),
        model_blob: BlobRef::of(&state.snapshot().to_bytes()),
        grad,
        batch_size: batch.size(),
        labels: Some(batch.targets.clone()),
        dp_applied,
    })
}

#[derive(Serialize, Deserialize)]
struct CaptureHeader {
    format: String,
    spec: ModelSpec,
    rng_seed: u64,
    model_blob: BlobRef,
    batch_size: usize,
    labels: Option<Vec<f64>>,
    dp_applied: Option<DpConfig>,
    len: usize,
}

const CAPTURE_FORMAT: &str = "fedx-capture/1";

impl CapturedGradient {
    /// Metadata frame, then the model snapshot, then the gradient frame.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CaptureHeader {
            format: CAPTURE_FORMAT.into(),
            spec: self.model.spec.clone(),
            rng_seed: self.model.rng_seed,
            model_blob: self.model_blob.clone(),
            batch_size: self.batch_size,
            labels: self.labels.clone(),
            dp_applied: self.dp_applied.clone(),
            len: 0,
        };
        let mut out = Vec::new();
        codec::write_frame(&header, &[], &mut out)?;
        out.extend(self.model.snapshot().to_bytes());
        self.grad.write_to(&mut out);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, _, rest) = codec::read_frame::<CaptureHeader>(bytes)?;
        if h.format != CAPTURE_FORMAT {
            return Err(Error::Format(format!("unknown capture format {}", h.format)));
        }
        let (params, rest) = ParamVector::read_from(rest)?;
        let (buffers, rest) = ParamVector::read_from(rest)?;
        let (grad, rest) = ParamVector::read_from(rest)?;
        if !rest.is_empty() {
            return Err(Error::Format("trailing bytes after capture".into()));
        }
        let model = ModelState::from_snapshot(&h.spec, &ModelSnapshot { params, buffers }, h.rng_seed)?;
        if !grad.same_layout(&model.params) {
            return Err(Error::Format("captured gradient layout does not match model".into()));
        }
        Ok(Self { model, model_blob: h.model_blob, grad, batch_size: h.batch_size, labels: h.labels, dp_applied: h.dp_applied })
    }
}
