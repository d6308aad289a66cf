//! Scenario sweep over DP budget, training amount and batch size.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, Matrix, TaskKind};
use crate::error::{Error, Result};
use crate::inversion::attack::{run_attack, AttackConfig, AttackInit, Reconstruction};
use crate::inversion::capture::capture_gradient;
use crate::inversion::images::{fixture_images, mean_image, write_pgm, write_raw};
use crate::privacy::DpConfig;
use crate::seed;
use crate::tensor::{local_train, Activation, ModelSpec, ModelState, OptimizerKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingAmounts {
    pub light: usize,
    pub extra: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainingAmounts {
    fn default() -> Self {
        Self { light: 20, extra: 150, epochs: 5, lr: 0.01, batch_size: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub image_side: usize,
    pub hidden: usize,
    pub seeds: Vec<u64>,
    pub clip: f64,
    pub epsilons: Vec<f64>,
    pub training: TrainingAmounts,
    pub batch_sizes: Vec<usize>,
    pub attack: AttackConfig,
    #[serde(default = "default_task")]
    pub task: TaskKind,
    /// Regression labels are drawn from `±[scale/2, scale]`.
    #[serde(default = "default_target_scale")]
    pub target_scale: f64,
}

fn default_task() -> TaskKind {
    TaskKind::Regression
}

fn default_target_scale() -> f64 {
    10.0
}

impl Default for SweepManifest {
    fn default() -> Self {
        Self {
            image_side: 16,
            hidden: 32,
            seeds: (0..5).collect(),
            clip: 1.0,
            epsilons: vec![0.1, 0.05, 0.01],
            training: TrainingAmounts::default(),
            batch_sizes: vec![1, 10, 50],
            attack: AttackConfig::default(),
            task: default_task(),
            target_scale: default_target_scale(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingAmount {
    Untrained,
    Light,
    Extra,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub dp_epsilon: Option<f64>,
    pub training: TrainingAmount,
    pub batch_size: usize,
}

/// Baseline (no DP, untrained, one image), then one axis varied at a time.
pub fn scenarios(m: &SweepManifest) -> Vec<Scenario> {
    let base = Scenario { name: "baseline".into(), dp_epsilon: None, training: TrainingAmount::Untrained, batch_size: 1 };
    let mut out = vec![base.clone()];
    for &eps in &m.epsilons {
        out.push(Scenario { name: format!("dp_eps_{eps}"), dp_epsilon: Some(eps), ..base.clone() });
    }
    for (name, t) in [("train_light", TrainingAmount::Light), ("train_extra", TrainingAmount::Extra)] {
        out.push(Scenario { name: name.into(), training: t, ..base.clone() });
    }
    for &b in m.batch_sizes.iter().filter(|&&b| b != 1) {
        out.push(Scenario { name: format!("batch_{b}"), batch_size: b, ..base.clone() });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scenario: String,
    pub seed: u64,
    pub mse: f64,
    pub psnr_db: f64,
    pub final_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: Scenario,
    pub runs: usize,
    pub mean_mse: f64,
    pub mean_psnr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub manifest: SweepManifest,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<ScenarioSummary>,
}

impl SweepTable {
    pub fn mean_psnr(&self, scenario: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.scenario.name == scenario).map(|s| s.mean_psnr_db)
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from("scenario,seed,mse,psnr_db,final_objective\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.scenario, r.seed, r.mse, r.psnr_db, r.final_objective));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("scenario,dp_epsilon,training,batch_size,runs,mean_mse,mean_psnr_db\n");
        for r in &self.summary {
            let eps = r.scenario.dp_epsilon.map(|e| e.to_string()).unwrap_or_else(|| "none".into());
            let training = serde_json::to_value(r.scenario.training).unwrap();
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.scenario.name,
                eps,
                training.as_str().unwrap_or_default(),
                r.scenario.batch_size,
                r.runs,
                r.mean_mse,
                r.mean_psnr_db
            ));
        }
        s
    }
}

/// One attack run with everything needed to inspect it.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub row: SweepRow,
    pub truth: Matrix,
    pub reconstruction: Reconstruction,
}

const POOL: usize = 260;
const TRAIN_OFFSET: usize = 100;

/// Fixture for one seed: the image pool, its labels and the untrained model.
pub struct Fixture {
    pub images: Vec<Matrix>,
    pub labels: Vec<f64>,
    pub model: ModelState,
}

pub fn fixture(m: &SweepManifest, seed_value: u64) -> Result<Fixture> {
    let images = fixture_images(POOL, m.image_side, seed::derive(seed_value, &[seed::tag("images")]));
    let labels = (0..POOL)
        .map(|i| {
            let bits = seed::derive(seed_value, &[seed::tag("labels"), i as u64]);
            match m.task {
                TaskKind::BinaryClassification => (bits & 1) as f64,
                TaskKind::Regression => {
                    let u = (bits >> 11) as f64 / (1u64 << 53) as f64;
                    let sign = if bits & 1 == 1 { 1.0 } else { -1.0 };
                    sign * m.target_scale * (0.5 + 0.5 * u)
                }
            }
        })
        .collect();
    let spec = ModelSpec::plain(vec![m.image_side * m.image_side, m.hidden, 1], Activation::Relu, m.task)?;
    let model = ModelState::init(&spec, seed::derive(seed_value, &[seed::tag("model")]))?;
    Ok(Fixture { images, labels, model })
}

fn dataset(images: &[Matrix], labels: &[f64]) -> Result<Dataset> {
    let d = images[0].as_slice().len();
    let values = images.iter().flat_map(|i| i.as_slice().to_vec()).collect();
    Dataset::new(Matrix::from_vec(images.len(), d, values)?, labels.to_vec())
}

pub fn run_scenario(m: &SweepManifest, scenario: &Scenario, seed_value: u64) -> Result<SweepRun> {
    let fx = fixture(m, seed_value)?;
    if scenario.batch_size == 0 || scenario.batch_size > TRAIN_OFFSET {
        return Err(Error::Config(format!("batch size must lie in 1..={TRAIN_OFFSET}")));
    }
    let model = match scenario.training {
        TrainingAmount::Untrained => fx.model.clone(),
        TrainingAmount::Light | TrainingAmount::Extra => {
            let n = if scenario.training == TrainingAmount::Light { m.training.light } else { m.training.extra };
            if n == 0 || TRAIN_OFFSET + n > POOL {
                return Err(Error::Config(format!("training amount must lie in 1..={}", POOL - TRAIN_OFFSET)));
            }
            let range = TRAIN_OFFSET..TRAIN_OFFSET + n;
            let data = dataset(&fx.images[range.clone()], &fx.labels[range])?;
            let cfg = TrainConfig {
                local_epochs: m.training.epochs,
                batch_size: m.training.batch_size,
                optimizer: OptimizerKind::Adam,
                lr0: m.training.lr,
                lr_decay: 1.0,
                trainable_mask: None,
            };
            local_train(&fx.model, &data, &cfg, 0)?.0
        }
    };
    let b = scenario.batch_size;
    let batch_data = dataset(&fx.images[..b], &fx.labels[..b])?;
    let batch = Batch::new(batch_data.inputs, batch_data.targets)?;
    let dp = scenario.dp_epsilon.map(|eps| DpConfig::laplace(eps, m.clip));
    let captured = capture_gradient(&model, &batch, dp.as_ref(), seed::derive(seed_value, &[seed::tag("dp")]))?;

    let mut cfg = m.attack.clone();
    cfg.seed = seed::derive(seed_value, &[seed::tag("attack")]);
    if cfg.init == AttackInit::DatasetMean && cfg.init_image.is_none() {
        cfg.init_image = Some(mean_image(&fx.images[50..TRAIN_OFFSET]));
    }
    let truth = fx.images[0].clone();
    let reconstruction = run_attack(&captured, Some(&truth), &cfg)?;
    let row = SweepRow {
        scenario: scenario.name.clone(),
        seed: seed_value,
        mse: reconstruction.mse.unwrap_or(f64::NAN),
        psnr_db: reconstruction.psnr_db.unwrap_or(f64::NAN),
        final_objective: reconstruction.objective_trace.last().copied().unwrap_or(f64::NAN),
    };
    Ok(SweepRun { row, truth, reconstruction })
}

pub fn summarize(m: &SweepManifest, list: &[Scenario], rows: &[SweepRow]) -> SweepTable {
    let summary = list
        .iter()
        .map(|s| {
            let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.scenario == s.name).collect();
            let n = mine.len().max(1) as f64;
            ScenarioSummary {
                scenario: s.clone(),
                runs: mine.len(),
                mean_mse: mine.iter().map(|r| r.mse).sum::<f64>() / n,
                mean_psnr_db: mine.iter().map(|r| r.psnr_db).sum::<f64>() / n,
            }
        })
        .collect();
    SweepTable { manifest: m.clone(), rows: rows.to_vec(), summary }
}

/// Runs every scenario for every seed. When `out_dir` is given, writes
/// `sweep.csv`, `summary.csv`, `sweep.json` and, per run, the reconstruction
/// as PGM plus raw f64.
pub fn sweep(m: &SweepManifest, out_dir: Option<&Path>) -> Result<SweepTable> {
    let list = scenarios(m);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("images"))?;
    }
    let mut rows = Vec::new();
    for s in &list {
        for &sd in &m.seeds {
            let run = run_scenario(m, s, sd)?;
            if let Some(dir) = out_dir {
                let stem = format!("{}_seed{}", s.name, sd);
                write_pgm(&dir.join("images").join(format!("{stem}.pgm")), &run.reconstruction.image)?;
                write_raw(&dir.join("images").join(format!("{stem}.f64")), &run.reconstruction.image)?;
                if s.name == "baseline" {
                    write_pgm(&dir.join("images").join(format!("truth_seed{sd}.pgm")), &run.truth)?;
                    write_raw(&dir.join("images").join(format!("truth_seed{sd}.f64")), &run.truth)?;
                }
            }
            rows.push(run.row);
        }
    }
    let table = summarize(m, &list, &rows);
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("sweep.csv"), table.rows_csv())?;
        std::fs::write(dir.join("summary.csv"), table.summary_csv())?;
        std::fs::write(dir.join("sweep.json"), serde_json::to_vec_pretty(&table)?)?;
    }
    Ok(table)
}
