//! Dense matrices, labelled datasets and the per-site dataset container.

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }
}

/// Inputs with one scalar target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Vec<f64>) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let d = self.subset(idx);
        Batch { inputs: d.inputs, targets: d.targets }
    }

    pub fn as_batch(&self) -> Batch {
        Batch { inputs: self.inputs.clone(), targets: self.targets.clone() }
    }
}

/// One mini-batch; always holds at least one row once validated.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Vec<f64>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        if inputs.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn size(&self) -> usize {
        self.targets.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    BinaryClassification,
}

/// A site's private data, split three ways.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteData {
    pub site_id: String,
    pub task: TaskKind,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Serialize, Deserialize)]
struct SiteHeader {
    format: String,
    site_id: String,
    task: TaskKind,
    feature_dim: usize,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    len: usize,
}

const SITE_FORMAT: &str = "fedx-site/1";

impl SiteData {
    /// Container layout: framed header, then `n_train + n_val + n_test` rows
    /// of `feature_dim + 1` values (features then target), splits in order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dim = self.train.feature_dim();
        let splits = [&self.train, &self.val, &self.test];
        if splits.iter().any(|s| s.feature_dim() != dim) {
            return Err(Error::Shape("splits disagree on feature dimension".into()));
        }
        let n: usize = splits.iter().map(|s| s.len()).sum();
        let mut values = Vec::with_capacity(n * (dim + 1));
        for s in splits {
            for i in 0..s.len() {
                values.extend_from_slice(s.inputs.row(i));
                values.push(s.targets[i]);
            }
        }
        let header = SiteHeader {
            format: SITE_FORMAT.into(),
            site_id: self.site_id.clone(),
            task: self.task,
            feature_dim: dim,
            n_train: self.train.len(),
            n_val: self.val.len(),
            n_test: self.test.len(),
            len: values.len(),
        };
        let mut out = Vec::new();
        codec::write_frame(&header, &values, &mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, values, _) = codec::read_frame::<SiteHeader>(bytes)?;
        if h.format != SITE_FORMAT {
            return Err(Error::Format(format!("unknown dataset format {}", h.format)));
        }
        let width = h.feature_dim + 1;
        if values.len() != (h.n_train + h.n_val + h.n_test) * width {
            return Err(Error::Format("dataset body does not match declared split sizes".into()));
        }
        let mut offset = 0;
        let mut take = |n: usize| -> Result<Dataset> {
            let mut inputs = Vec::with_capacity(n * h.feature_dim);
            let mut targets = Vec::with_capacity(n);
            for row in values[offset..offset + n * width].chunks_exact(width) {
                inputs.extend_from_slice(&row[..h.feature_dim]);
                targets.push(row[h.feature_dim]);
            }
            offset += n * width;
            Dataset::new(Matrix::from_vec(n, h.feature_dim, inputs)?, targets)
        };
        let train = take(h.n_train)?;
        let val = take(h.n_val)?;
        let test = take(h.n_test)?;
        Ok(SiteData { site_id: h.site_id, task: h.task, train, val, test })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize, offset: f64) -> Dataset {
        let inputs = Matrix::from_vec(n, 2, (0..2 * n).map(|i| i as f64 + offset).collect()).unwrap();
        Dataset::new(inputs, (0..n).map(|i| i as f64 * 0.5).collect()).unwrap()
    }

    #[test]
    fn site_container_roundtrip() {
        let site = SiteData {
            site_id: "anl".into(),
            task: TaskKind::Regression,
            train: tiny(3, 0.0),
            val: tiny(1, 10.0),
            test: tiny(2, -4.5),
        };
        let back = SiteData::from_bytes(&site.to_bytes().unwrap()).unwrap();
        assert_eq!(back, site);
    }

    #[test]
    fn truncated_container_is_rejected() {
        let site = SiteData {
            site_id: "x".into(),
            task: TaskKind::BinaryClassification,
            train: tiny(2, 0.0),
            val: tiny(1, 0.0),
            test: tiny(1, 0.0),
        };
        let bytes = site.to_bytes().unwrap();
        assert!(SiteData::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn batch_rejects_mismatched_rows() {
        assert!(Batch::new(Matrix::zeros(2, 1), vec![1.0]).is_err());
        assert!(Batch::new(Matrix::zeros(0, 1), vec![]).is_err());
    }
}
