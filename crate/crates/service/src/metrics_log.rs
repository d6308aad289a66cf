//! Append-only per-experiment metric streams, mirrored to JSON-lines files.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::clock::{rfc3339, Clock};
use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricPhase {
    Train,
    Validate,
    CrossSite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Position in the experiment's stream.
    pub seq: u64,
    pub experiment_id: String,
    pub round: u32,
    pub client_id: String,
    pub phase: MetricPhase,
    pub loss: f64,
    pub metric_name: String,
    pub metric_value: f64,
    pub timestamp: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<u64>,
}

/// Everything but the position and the time stamp.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsEntry {
    pub round: u32,
    pub client_id: String,
    pub phase: MetricPhase,
    pub loss: f64,
    pub metric_name: String,
    pub metric_value: f64,
    pub model: Option<String>,
    pub n_samples: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsPage {
    pub records: Vec<MetricsRecord>,
    pub cursor: u64,
}

pub struct MetricsLog {
    streams: Mutex<HashMap<String, Arc<Mutex<Vec<MetricsRecord>>>>>,
    dir: Option<PathBuf>,
    clock: Arc<dyn Clock>,
}

impl MetricsLog {
    pub fn new(dir: Option<PathBuf>, clock: Arc<dyn Clock>) -> Result<Self> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
        }
        Ok(Self { streams: Mutex::new(HashMap::new()), dir, clock })
    }

    pub fn file_of(&self, experiment_id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{experiment_id}.jsonl")))
    }

    pub fn open(&self, experiment_id: &str) {
        self.streams.lock().unwrap().entry(experiment_id.into()).or_default();
    }

    fn stream(&self, experiment_id: &str) -> Result<Arc<Mutex<Vec<MetricsRecord>>>> {
        self.streams
            .lock()
            .unwrap()
            .get(experiment_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("experiment {experiment_id}")))
    }

    pub fn append(&self, experiment_id: &str, entry: MetricsEntry) -> Result<MetricsRecord> {
        let stream = self.stream(experiment_id)?;
        let mut records = stream.lock().unwrap();
        let rec = MetricsRecord {
            seq: records.len() as u64,
            experiment_id: experiment_id.into(),
            round: entry.round,
            client_id: entry.client_id,
            phase: entry.phase,
            loss: entry.loss,
            metric_name: entry.metric_name,
            metric_value: entry.metric_value,
            timestamp: rfc3339(self.clock.now_ms()),
            model: entry.model,
            n_samples: entry.n_samples,
        };
        if let Some(path) = self.file_of(experiment_id) {
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            let line = serde_json::to_string(&rec).map_err(|e| ServiceError::Internal(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
        records.push(rec.clone());
        Ok(rec)
    }

    /// Records from `cursor` on, plus the cursor to resume from.
    pub fn feed(&self, experiment_id: &str, cursor: u64, limit: Option<usize>) -> Result<MetricsPage> {
        let stream = self.stream(experiment_id)?;
        let records = stream.lock().unwrap();
        let start = (cursor as usize).min(records.len());
        let end = limit.map_or(records.len(), |l| (start + l).min(records.len()));
        Ok(MetricsPage { records: records[start..end].to_vec(), cursor: end as u64 })
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ServiceError::BadRequest(format!("{}: {e}", path.display()))))
        .collect()
}
