//! Parameters, layers and the Adam optimizer on top of [`crate::autodiff`].

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};

/// Index of a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub(crate) fn from_parts(names: Vec<String>, values: Vec<Array2<f64>>) -> Self {
        Self { names, values }
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
}

/// Fully connected layer, `x (T x in) -> T x out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), uniform(rng, inputs, outputs, bound)),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, outputs))),
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        g.add_row(g.matmul(x, g.param(store, self.weight)), g.param(store, self.bias))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Temporal padding policy of a [`Conv1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Output length `ceil(T / stride)`, zero padding split around the input.
    Same,
    /// No padding, output length `(T - kernel) / stride + 1`.
    Valid,
}

/// 1-D convolution over time, `x (T x in) -> T' x out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / ((inputs * kernel) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), uniform(rng, kernel * inputs, outputs, bound)),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, outputs))),
            kernel,
            stride,
            padding,
        }
    }

    /// Output length and left padding for an input of `t_len` frames.
    pub fn geometry(&self, t_len: usize) -> Option<(usize, usize)> {
        match self.padding {
            Padding::Same => {
                let out = t_len.div_ceil(self.stride);
                let needed = ((out.saturating_sub(1)) * self.stride + self.kernel).saturating_sub(t_len);
                (out > 0).then_some((out, needed / 2))
            }
            Padding::Valid => (t_len >= self.kernel).then(|| ((t_len - self.kernel) / self.stride + 1, 0)),
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        let (t_len, _) = g.shape(x);
        let (out_len, pad_left) = self
            .geometry(t_len)
            .unwrap_or_else(|| panic!("input of {t_len} frames too short for kernel {}", self.kernel));
        let cols = if self.kernel == 1 && self.stride == 1 {
            x
        } else {
            g.unfold(x, self.kernel, self.stride, pad_left, out_len)
        };
        g.add_row(g.matmul(cols, g.param(store, self.weight)), g.param(store, self.bias))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Transposed 1-D convolution with kernel equal to stride: every input frame
/// expands into `stride` output frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub outputs: usize,
}

impl ConvTranspose1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), uniform(rng, inputs, stride * outputs, bound)),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, outputs))),
            stride,
            outputs,
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Var {
        let (m, _) = g.shape(x);
        let expanded = g.matmul(x, g.param(store, self.weight));
        let frames = g.reshape(expanded, m * self.stride, self.outputs);
        g.add_row(frames, g.param(store, self.bias))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Rescales gradients so their global norm does not exceed `cap`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, cap: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > cap && norm.is_finite() {
        grads.scale(cap / norm);
    }
    norm
}

/// Adam optimizer over a fixed parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    params: Vec<ParamId>,
    #[serde(skip)]
    moments: HashMap<ParamId, (Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, params: Vec<ParamId>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            params,
            moments: HashMap::new(),
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Applies one update to every parameter of the group that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for &id in &self.params {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Array2::zeros(g.raw_dim()), Array2::zeros(g.raw_dim())));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            ndarray::Zip::from(store.value_mut(id))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }

    /// First and second moment estimates, ordered like [`Adam::params`].
    pub fn moments(&self) -> Vec<Option<(&Array2<f64>, &Array2<f64>)>> {
        self.params
            .iter()
            .map(|id| self.moments.get(id).map(|(m, v)| (m, v)))
            .collect()
    }

    pub(crate) fn set_moment(&mut self, id: ParamId, m: Array2<f64>, v: Array2<f64>) {
        self.moments.insert(id, (m, v));
    }
}
