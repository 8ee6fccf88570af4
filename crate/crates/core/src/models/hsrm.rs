use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv, Init, Mlp3};
use super::{check_input, ModelError};
use crate::tensorcore::{Graph, NormMode, ParamStore, Real, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HsrmConfig {
    pub n_stacks: usize,
    pub units_per_stack: usize,
    pub channels: usize,
    pub kernel: usize,
    pub head_hidden: (usize, usize),
    pub n_classes: usize,
}

impl HsrmConfig {
    pub fn new(n_classes: usize) -> Self {
        Self { n_stacks: 4, units_per_stack: 2, channels: 32, kernel: 3, head_hidden: (128, 64), n_classes }
    }

    pub fn validate(&self, input_len: usize) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(format!("hsrm: {m}")));
        if self.n_stacks == 0 || self.n_stacks >= usize::BITS as usize {
            return fail(format!("n_stacks must be at least 1, got {}", self.n_stacks));
        }
        if self.channels == 0 || self.n_classes == 0 || self.head_hidden.0 == 0 || self.head_hidden.1 == 0 {
            return fail("channels, classes and head widths must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return fail(format!("kernel {} must be odd to preserve length", self.kernel));
        }
        let div = 1usize << self.n_stacks;
        if input_len == 0 || !input_len.is_multiple_of(div) {
            return fail(format!("input length {input_len} is not divisible by 2^{}", self.n_stacks));
        }
        Ok(())
    }
}

/// `x + g(x)` with `g = conv → BN → ReLU → conv → BN`.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
}

impl ResidualUnit {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize, kernel: usize) -> Result<Self, TensorError> {
        Ok(Self {
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), channels, channels, kernel)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), channels)?,
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), channels, channels, kernel)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), channels)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var, mode: NormMode) -> Result<Var, TensorError> {
        let h = self.conv1.forward(g, store, x)?;
        let h = self.bn1.forward(g, store, h, mode)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, store, h)?;
        let h = self.bn2.forward(g, store, h, mode)?;
        g.add(x, h)
    }
}

/// Convolutional expert: stem conv, residual stacks each ending in a
/// stride-2 max pool, then a three-layer classifier head whose output layer
/// starts at zero, so an untrained model predicts the uniform distribution.
#[derive(Clone, Debug)]
pub struct Hsrm {
    pub config: HsrmConfig,
    pub input_len: usize,
    pub stem: Conv,
    pub stacks: Vec<Vec<ResidualUnit>>,
    pub head: Mlp3,
}

impl Hsrm {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, config: &HsrmConfig, input_len: usize) -> Result<Self, ModelError> {
        config.validate(input_len)?;
        let c = config.channels;
        let stem = Conv::new(store, rng, &format!("{prefix}.stem"), 2, c, config.kernel)?;
        let mut stacks = Vec::with_capacity(config.n_stacks);
        for s in 0..config.n_stacks {
            let units = (0..config.units_per_stack)
                .map(|u| ResidualUnit::new(store, rng, &format!("{prefix}.stack{s}.unit{u}"), c, config.kernel))
                .collect::<Result<_, _>>()?;
            stacks.push(units);
        }
        let flat = c * (input_len >> config.n_stacks);
        let (h1, h2) = config.head_hidden;
        let head = Mlp3::new(store, rng, &format!("{prefix}.head"), [flat, h1, h2, config.n_classes], Init::Zero)?;
        Ok(Self { config: config.clone(), input_len, stem, stacks, head })
    }

    /// `[B, 2, L]` frames to `[B, K]` class probabilities.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var, mode: NormMode) -> Result<Var, ModelError> {
        let b = check_input(g, x, self.input_len)?;
        let mut h = self.stem.forward(g, store, x)?;
        for stack in &self.stacks {
            for unit in stack {
                h = unit.forward(g, store, h, mode)?;
            }
            h = g.max_pool1d(h, 2, 2)?;
        }
        let flat = self.config.channels * (self.input_len >> self.config.n_stacks);
        let h = g.reshape(h, &[b, flat])?;
        let logits = self.head.forward(g, store, h)?;
        Ok(g.softmax(logits, 1)?)
    }
}
