use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::data::TaskKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Architecture of a dense network. Layer `l` (1-based) maps
/// `layer_sizes[l-1]` inputs to `layer_sizes[l]` outputs; every layer but the
/// last is hidden and may carry batch normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub batch_norm: Vec<bool>,
    pub task: TaskKind,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, batch_norm: Vec<bool>, task: TaskKind) -> Result<Self> {
        let spec = Self { layer_sizes, activation, batch_norm, task };
        spec.validate()?;
        Ok(spec)
    }

    /// MLP without batch normalization.
    pub fn plain(layer_sizes: Vec<usize>, activation: Activation, task: TaskKind) -> Result<Self> {
        let hidden = layer_sizes.len().saturating_sub(2);
        Self::new(layer_sizes, activation, vec![false; hidden], task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config("model needs at least an input and an output size".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if *self.layer_sizes.last().unwrap() != 1 {
            return Err(Error::Config("output layer must have exactly one unit".into()));
        }
        if self.batch_norm.len() != self.num_hidden() {
            return Err(Error::Config(format!(
                "batch_norm has {} entries for {} hidden layers",
                self.batch_norm.len(),
                self.num_hidden()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_hidden(&self) -> usize {
        self.layer_sizes.len().saturating_sub(2)
    }

    /// Whether 1-based layer `l` is followed by batch normalization.
    pub fn has_bn(&self, l: usize) -> bool {
        l >= 1 && l <= self.num_hidden() && self.batch_norm[l - 1]
    }

    pub fn bn_layers(&self) -> Vec<usize> {
        (1..=self.num_hidden()).filter(|&l| self.has_bn(l)).collect()
    }

    /// Names of all batch-normalization affine parameters.
    pub fn bn_param_names(&self) -> Vec<String> {
        self.bn_layers()
            .into_iter()
            .flat_map(|l| [format!("gamma{l}"), format!("beta{l}")])
            .collect()
    }

    pub fn layout(&self) -> Vec<LayoutEntry> {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            entries.push(LayoutEntry { name, offset, shape });
            offset += n;
        };
        for l in 1..=self.num_layers() {
            let (fan_in, fan_out) = (self.layer_sizes[l - 1], self.layer_sizes[l]);
            push(format!("W{l}"), vec![fan_out, fan_in]);
            push(format!("b{l}"), vec![fan_out]);
            if self.has_bn(l) {
                push(format!("gamma{l}"), vec![fan_out]);
                push(format!("beta{l}"), vec![fan_out]);
            }
        }
        entries
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector with a named layout; the unit exchanged between
/// server and clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    format: String,
    layout: Vec<LayoutEntry>,
    len: usize,
}

const PARAM_FORMAT: &str = "fedx-params/1";

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<LayoutEntry>) -> Result<Self> {
        let pv = Self { values, layout };
        pv.validate()?;
        Ok(pv)
    }

    pub fn zeros(layout: Vec<LayoutEntry>) -> Self {
        let n = layout.last().map_or(0, |e| e.offset + e.len());
        Self { values: vec![0.0; n], layout }
    }

    pub fn zeros_like(&self) -> Self {
        Self { values: vec![0.0; self.values.len()], layout: self.layout.clone() }
    }

    /// Contiguous, non-overlapping, finite.
    pub fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for e in &self.layout {
            if e.offset != expected {
                return Err(Error::Format(format!("layout entry {} is not contiguous", e.name)));
            }
            expected += e.len();
        }
        if expected != self.values.len() {
            return Err(Error::Format(format!(
                "layout covers {expected} values but vector holds {}",
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite value at index {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.layout.iter().find(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entry(name).map(|e| &self.values[e.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.entry(name)?.range();
        Some(&mut self.values[r])
    }

    pub(crate) fn slice(&self, name: &str) -> &[f64] {
        self.get(name).unwrap_or_else(|| panic!("layout has no entry {name}"))
    }

    pub(crate) fn slice_mut(&mut self, name: &str) -> &mut [f64] {
        self.get_mut(name).unwrap_or_else(|| panic!("layout has no entry {name}"))
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out);
        out
    }

    pub(crate) fn write_to(&self, out: &mut Vec<u8>) {
        let header = ParamHeader { format: PARAM_FORMAT.into(), layout: self.layout.clone(), len: self.values.len() };
        codec::write_frame(&header, &self.values, out).expect("layout header always serializes");
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (pv, tail) = Self::read_from(bytes)?;
        if !tail.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after parameter vector", tail.len())));
        }
        Ok(pv)
    }

    pub(crate) fn read_from(bytes: &[u8]) -> Result<(Self, &[u8])> {
        let (h, values, tail) = codec::read_frame::<ParamHeader>(bytes)?;
        if h.format != PARAM_FORMAT {
            return Err(Error::Format(format!("unknown parameter format {}", h.format)));
        }
        Ok((ParamVector::new(values, h.layout)?, tail))
    }
}

/// Batch-normalization running statistics of one hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Adam moment buffers; empty until the first Adam step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub bn_running: Vec<RunningStats>,
    pub optimizer: OptimizerState,
    pub rng_seed: u64,
    /// Epochs completed so far; seeds each epoch's shuffle so training split
    /// across several calls matches one uninterrupted run.
    pub epochs_done: u64,
}

impl ModelState {
    /// Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), gamma = 1,
    /// beta = 0, running mean 0 and variance 1.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamVector::zeros(spec.layout());
        for l in 1..=spec.num_layers() {
            let bound = 1.0 / (spec.layer_sizes[l - 1] as f64).sqrt();
            for name in [format!("W{l}"), format!("b{l}")] {
                for v in params.slice_mut(&name) {
                    *v = rng.random_range(-bound..bound);
                }
            }
            if spec.has_bn(l) {
                params.slice_mut(&format!("gamma{l}")).fill(1.0);
            }
        }
        let bn_running = spec
            .bn_layers()
            .into_iter()
            .map(|l| RunningStats { layer: l, mean: vec![0.0; spec.layer_sizes[l]], var: vec![1.0; spec.layer_sizes[l]] })
            .collect();
        Ok(Self { spec: spec.clone(), params, bn_running, optimizer: OptimizerState::default(), rng_seed: seed, epochs_done: 0 })
    }

    pub fn with_params(spec: &ModelSpec, params: ParamVector, seed: u64) -> Result<Self> {
        let mut state = Self::init(spec, seed)?;
        if params.layout != state.params.layout {
            return Err(Error::Shape("parameter layout does not match model spec".into()));
        }
        state.params = params;
        Ok(state)
    }

    pub fn running(&self, layer: usize) -> Option<&RunningStats> {
        self.bn_running.iter().find(|s| s.layer == layer)
    }

    /// Running statistics flattened as `running_mean{l}` / `running_var{l}`.
    pub fn buffers(&self) -> ParamVector {
        let mut values = Vec::new();
        let mut layout = Vec::new();
        for s in &self.bn_running {
            for (name, v) in [(format!("running_mean{}", s.layer), &s.mean), (format!("running_var{}", s.layer), &s.var)] {
                layout.push(LayoutEntry { name, offset: values.len(), shape: vec![v.len()] });
                values.extend_from_slice(v);
            }
        }
        ParamVector { values, layout }
    }

    pub fn set_buffers(&mut self, buffers: &ParamVector) -> Result<()> {
        if buffers.layout != self.buffers().layout {
            return Err(Error::Shape("running-statistics layout does not match model".into()));
        }
        for s in &mut self.bn_running {
            s.mean.copy_from_slice(buffers.slice(&format!("running_mean{}", s.layer)));
            s.var.copy_from_slice(buffers.slice(&format!("running_var{}", s.layer)));
        }
        Ok(())
    }

    /// Wire form of the model: the parameter frame followed by the
    /// running-statistics frame. Optimizer state stays with its owner.
    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot { params: self.params.clone(), buffers: self.buffers() }
    }

    /// Replaces weights and running statistics, keeping optimizer state,
    /// seed and epoch counter.
    pub fn load_snapshot(&mut self, snap: &ModelSnapshot) -> Result<()> {
        if !snap.params.same_layout(&self.params) {
            return Err(Error::Shape("snapshot layout does not match model".into()));
        }
        self.set_buffers(&snap.buffers)?;
        self.params = snap.params.clone();
        Ok(())
    }

    pub fn from_snapshot(spec: &ModelSpec, snap: &ModelSnapshot, seed: u64) -> Result<Self> {
        let mut state = Self::init(spec, seed)?;
        state.load_snapshot(snap)?;
        Ok(state)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub params: ParamVector,
    pub buffers: ParamVector,
}

impl ModelSnapshot {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.params.write_to(&mut out);
        self.buffers.write_to(&mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, rest) = ParamVector::read_from(bytes)?;
        let (buffers, rest) = ParamVector::read_from(rest)?;
        if !rest.is_empty() {
            return Err(Error::Format("trailing bytes after model snapshot".into()));
        }
        Ok(Self { params, buffers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn_spec() -> ModelSpec {
        ModelSpec::new(vec![3, 4, 2, 1], Activation::Relu, vec![true, false], TaskKind::Regression).unwrap()
    }

    #[test]
    fn spec_invariants() {
        assert!(ModelSpec::plain(vec![3], Activation::Relu, TaskKind::Regression).is_err());
        assert!(ModelSpec::plain(vec![3, 2], Activation::Relu, TaskKind::Regression).is_err());
        assert!(ModelSpec::new(vec![3, 4, 1], Activation::Relu, vec![], TaskKind::Regression).is_err());
        assert!(ModelSpec::plain(vec![3, 0, 1], Activation::Relu, TaskKind::Regression).is_err());
    }

    #[test]
    fn layout_is_contiguous_and_named() {
        let spec = bn_spec();
        let names: Vec<_> = spec.layout().into_iter().map(|e| e.name).collect();
        assert_eq!(names, ["W1", "b1", "gamma1", "beta1", "W2", "b2", "W3", "b3"]);
        let state = ModelState::init(&spec, 1).unwrap();
        state.params.validate().unwrap();
        assert_eq!(state.params.len(), 12 + 4 + 4 + 4 + 8 + 2 + 2 + 1);
        assert_eq!(state.params.get("gamma1").unwrap(), &[1.0; 4]);
        assert_eq!(spec.bn_param_names(), ["gamma1", "beta1"]);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let spec = ModelSpec::plain(vec![16, 8, 1], Activation::Relu, TaskKind::Regression).unwrap();
        let state = ModelState::init(&spec, 9).unwrap();
        assert!(state.params.get("W1").unwrap().iter().all(|v| v.abs() < 0.25));
        assert_eq!(ModelState::init(&spec, 9).unwrap(), state);
        assert_ne!(ModelState::init(&spec, 10).unwrap().params, state.params);
    }

    #[test]
    fn snapshot_roundtrip_is_bit_exact() {
        let mut state = ModelState::init(&bn_spec(), 3).unwrap();
        state.params.values[0] = -0.0;
        state.bn_running[0].var[1] = 2.5;
        let bytes = state.snapshot().to_bytes();
        let back = ModelSnapshot::from_bytes(&bytes).unwrap();
        assert_eq!(back.params.values[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back, state.snapshot());
    }

    #[test]
    fn non_finite_vectors_rejected() {
        let mut pv = ModelState::init(&bn_spec(), 3).unwrap().params;
        pv.values[2] = f64::NAN;
        assert!(pv.validate().is_err());
        assert!(ParamVector::from_bytes(&pv.to_bytes()).is_err());
    }
}
