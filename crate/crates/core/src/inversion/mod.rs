//! Gradient-inversion attack laboratory.

mod attack;
mod capture;
mod images;
mod input_grad;
mod objective;
mod recover;
mod sweep;

pub use attack::{
    grid_search, image_shape, objective_gradient, run_attack, AttackConfig, AttackGrid, AttackInit, AttackOptimizer, GradientRoute,
    Reconstruction,
};
pub use capture::{capture_gradient, CapturedGradient};
pub use images::{fixture_images, mean_image, read_raw, write_pgm, write_raw};
pub use input_grad::{input_gradient, supports_closed_form};
pub use objective::{attack_objective, bn_penalty, cosine_similarity, total_variation};
pub use recover::recover_first_layer;
pub use sweep::{
    fixture, run_scenario, scenarios, summarize, sweep, Fixture, Scenario, ScenarioSummary, SweepManifest, SweepRow, SweepRun,
    SweepTable, TrainingAmount, TrainingAmounts,
};
