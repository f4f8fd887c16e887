//! Parameter storage and the forward-pass session shared by all models.

use std::collections::{BTreeMap, HashMap};

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{BatchNormStats, Graph, NormMode, Real, Tensor, Var};

/// Learnable tensors plus non-learnable buffers (batch-norm running
/// statistics), keyed by dotted layer path.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NetworkParams<T> {
    pub weights: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> NetworkParams<T> {
    pub fn new() -> Self {
        Self { weights: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    /// Number of learnable scalars.
    pub fn num_trainable(&self) -> usize {
        self.weights.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            weights: self.weights.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn weight(&self, key: &str) -> Result<&Tensor<T>> {
        self.weights.get(key).ok_or_else(|| Error::config(format!("missing parameter {key}")))
    }

    pub fn weight_mut(&mut self, key: &str) -> Result<&mut Tensor<T>> {
        self.weights.get_mut(key).ok_or_else(|| Error::config(format!("missing parameter {key}")))
    }
}

/// Builds parameters with seeded initialization.
pub struct ParamInit<'a, T> {
    pub params: &'a mut NetworkParams<T>,
    pub rng: &'a mut Rng,
}

impl<T: Real> ParamInit<'_, T> {
    /// Kaiming-normal weight: std `sqrt(2 / fan_in)`, fan-in = product of all
    /// but the first extent.
    pub fn kaiming(&mut self, key: String, shape: &[usize]) {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let t = Tensor::from_fn(shape, |_| T::of(normal.sample(self.rng)));
        self.params.weights.insert(key, t);
    }

    pub fn zeros(&mut self, key: String, shape: &[usize]) {
        self.params.weights.insert(key, Tensor::zeros(shape));
    }

    pub fn ones(&mut self, key: String, shape: &[usize]) {
        self.params.weights.insert(key, Tensor::ones(shape));
    }

    /// Batch norm at `path`: unit scale, zero shift, fresh running stats.
    pub fn batch_norm(&mut self, path: &str, channels: usize) {
        self.ones(format!("{path}.gamma"), &[channels]);
        self.zeros(format!("{path}.beta"), &[channels]);
        self.params.buffers.insert(format!("{path}.running_mean"), Tensor::zeros(&[channels]));
        self.params.buffers.insert(format!("{path}.running_var"), Tensor::ones(&[channels]));
    }

    /// Kaiming weight `[out, in]` and zero bias for a per-voxel linear map.
    pub fn linear(&mut self, path: &str, cin: usize, cout: usize) {
        self.kaiming(format!("{path}.weight"), &[cout, cin]);
        self.zeros(format!("{path}.bias"), &[cout]);
    }

    /// Zero weight and bias for a per-voxel linear map.
    pub fn linear_zero(&mut self, path: &str, cin: usize, cout: usize) {
        self.zeros(format!("{path}.weight"), &[cout, cin]);
        self.zeros(format!("{path}.bias"), &[cout]);
    }
}

/// One forward pass: a fresh tape over a parameter set.
pub struct Session<'p, T: Real> {
    pub graph: Graph<T>,
    params: &'p mut NetworkParams<T>,
    vars: HashMap<String, Var>,
    pub mode: NormMode,
    track: bool,
}

impl<'p, T: Real> Session<'p, T> {
    /// `track` puts parameters on the tape as gradient-tracking leaves.
    pub fn new(params: &'p mut NetworkParams<T>, mode: NormMode, track: bool) -> Self {
        Self { graph: Graph::new(), params, vars: HashMap::new(), mode, track }
    }

    pub fn params(&self) -> &NetworkParams<T> {
        self.params
    }

    /// Tape handle of parameter `key`, inserted on first use.
    pub fn p(&mut self, key: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(key) {
            return Ok(v);
        }
        let t = self.params.weight(key)?.clone();
        let v = if self.track { self.graph.param(t) } else { self.graph.constant(t) };
        self.vars.insert(key.to_string(), v);
        Ok(v)
    }

    pub fn has(&self, key: &str) -> bool {
        self.params.weights.contains_key(key)
    }

    /// Batch norm with parameters and running statistics under `path`.
    pub fn bn(&mut self, x: Var, path: &str) -> Result<Var> {
        let gamma = self.p(&format!("{path}.gamma"))?;
        let beta = self.p(&format!("{path}.beta"))?;
        let mk = format!("{path}.running_mean");
        let vk = format!("{path}.running_var");
        let missing = || Error::config(format!("missing running stats for {path}"));
        let mut stats = BatchNormStats {
            mean: self.params.buffers.get(&mk).ok_or_else(missing)?.data().to_vec(),
            var: self.params.buffers.get(&vk).ok_or_else(missing)?.data().to_vec(),
        };
        let y = self.graph.batch_norm(x, gamma, beta, &mut stats, self.mode)?;
        if self.mode == NormMode::Train {
            self.params.buffers.get_mut(&mk).expect("checked").data_mut().copy_from_slice(&stats.mean);
            self.params.buffers.get_mut(&vk).expect("checked").data_mut().copy_from_slice(&stats.var);
        }
        Ok(y)
    }

    /// Per-voxel linear map with `{path}.weight` and `{path}.bias`.
    pub fn linear(&mut self, x: Var, path: &str) -> Result<Var> {
        let w = self.p(&format!("{path}.weight"))?;
        let b = self.p(&format!("{path}.bias"))?;
        self.graph.pointwise(x, w, Some(b))
    }

    /// Gradients of every parameter touched in this session.
    pub fn grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.vars.iter().filter_map(|(k, &v)| self.graph.grad(v).map(|g| (k.clone(), g))).collect()
    }
}
