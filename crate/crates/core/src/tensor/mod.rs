//! Minimal dense neural-network engine.

mod model;
mod nn;
mod train;

pub use model::{Activation, LayoutEntry, ModelSnapshot, ModelSpec, ModelState, OptimizerState, ParamVector, RunningStats};
pub use nn::{forward, loss_and_grad, loss_from_outputs, sigmoid, BatchStats, Mode, BN_EPS, BN_MOMENTUM};
pub use train::{
    evaluate_loss, finetune, local_train, lr_schedule, predict, OptimizerKind, TrainConfig, DEFAULT_FINETUNE_EPOCHS,
};
pub(crate) use nn::loss_grad_stats;
