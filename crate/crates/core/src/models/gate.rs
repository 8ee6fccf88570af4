use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Init, Mlp3};
use super::{check_input, ModelError};
use crate::tensorcore::{Graph, ParamStore, Real, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub hidden: (usize, usize),
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { hidden: (64, 32) }
    }
}

/// MLP over the flattened frame giving the probability that the input is a
/// high-SNR signal.
#[derive(Clone, Debug)]
pub struct Gate {
    pub input_len: usize,
    pub mlp: Mlp3,
}

impl Gate {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, config: &GateConfig, input_len: usize) -> Result<Self, ModelError> {
        let (h1, h2) = config.hidden;
        if h1 == 0 || h2 == 0 || input_len == 0 {
            return Err(ModelError::Config("gate: widths and input length must be positive".into()));
        }
        let mlp = Mlp3::new(store, rng, &format!("{prefix}.mlp"), [2 * input_len, h1, h2, 1], Init::Xavier)?;
        Ok(Self { input_len, mlp })
    }

    /// `[B, 2, L]` frames to `[B]` values in (0, 1).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let b = check_input(g, x, self.input_len)?;
        let flat = g.reshape(x, &[b, 2 * self.input_len])?;
        let z = self.mlp.forward(g, store, flat)?;
        let z = g.reshape(z, &[b])?;
        Ok(g.sigmoid(z)?)
    }
}
