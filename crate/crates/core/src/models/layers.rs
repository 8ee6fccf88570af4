//! Parameterized building blocks shared by the three networks.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::tensorcore::{BatchNormOpts, Graph, NormMode, ParamId, ParamStore, Real, RunningStats, Tensor, TensorError, Var};

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform on `±sqrt(6 / fan_in)`, for weights feeding a ReLU.
    He,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Zero,
}

impl Init {
    pub fn bound(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Init::He => (6.0 / fan_in as f64).sqrt(),
            Init::Xavier => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            Init::Zero => 0.0,
        }
    }
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `y = x·W + b` over the last axis; `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Result<Self, TensorError> {
        let w = match init {
            Init::Zero => Tensor::zeros([fan_in, fan_out]),
            _ => uniform(rng, &[fan_in, fan_out], init.bound(fan_in, fan_out)),
        };
        let w = store.add(&format!("{name}.w"), w)?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros([fan_out]))?;
        Ok(Self { w, b })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Stride-1 convolution padded to preserve length for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self, TensorError> {
        let bound = Init::He.bound(c_in * kernel, c_out * kernel);
        let w = store.add(&format!("{name}.w"), uniform(rng, &[c_out, c_in, kernel], bound))?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros([c_out]))?;
        Ok(Self { w, b, pad: kernel / 2 })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        g.conv1d(x, w, b, 1, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: RunningStats,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self, TensorError> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full([channels], 1.0))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros([channels]))?,
            stats: RunningStats {
                mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros([channels]))?,
                var: store.add_buffer(&format!("{name}.running_var"), Tensor::full([channels], 1.0))?,
            },
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var, mode: NormMode) -> Result<Var, TensorError> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        g.batch_norm(x, gamma, beta, self.stats, store, BatchNormOpts { mode, ..Default::default() })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, TensorError> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full([dim], 1.0))?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros([dim]))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        g.layer_norm(x, gamma, beta, crate::tensorcore::LAYER_NORM_EPS)
    }
}

/// Three linear layers with ReLU between them; returns pre-activation
/// outputs of the last layer, initialized per `last`.
#[derive(Clone, Debug)]
pub struct Mlp3 {
    pub layers: [Linear; 3],
}

impl Mlp3 {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: [usize; 4], last: Init) -> Result<Self, TensorError> {
        Ok(Self {
            layers: [
                Linear::new(store, rng, &format!("{name}.0"), dims[0], dims[1], Init::He)?,
                Linear::new(store, rng, &format!("{name}.1"), dims[1], dims[2], Init::He)?,
                Linear::new(store, rng, &format!("{name}.2"), dims[2], dims[3], last)?,
            ],
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let h = self.layers[0].forward(g, store, x)?;
        let h = g.relu(h)?;
        let h = self.layers[1].forward(g, store, h)?;
        let h = g.relu(h)?;
        self.layers[2].forward(g, store, h)
    }
}
