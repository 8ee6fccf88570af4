use crate::tensorcore::ParamStore;

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, betas: (0.9, 0.999), eps: 1e-8 }
    }
}

/// One Adam update of `params` in place at step `t` (1-based).
pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) -> Result<(), TrainError> {
    let n = params.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(TrainError::Shape(format!(
            "adam_step: params {n}, grads {}, m {}, v {}",
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    if t == 0 {
        return Err(TrainError::Config("adam step index starts at 1".into()));
    }
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for k in 0..n {
        let g = grads[k];
        m[k] = b1 * m[k] + (1.0 - b1) * g;
        v[k] = b2 * v[k] + (1.0 - b2) * g * g;
        let m_hat = m[k] / c1;
        let v_hat = v[k] / c2;
        params[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam moments for every trainable tensor of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |_| store.trainable_ids().iter().map(|&id| vec![0.0; store.value(id).numel()]).collect();
        Self { config, t: 0, m: zeros(()), v: zeros(()) }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), TrainError> {
        let ids = store.trainable_ids();
        if ids.len() != self.m.len() {
            return Err(TrainError::Shape(format!("optimizer tracks {} tensors, store has {}", self.m.len(), ids.len())));
        }
        self.t += 1;
        for (slot, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let grads = p.grad.data().to_vec();
            adam_step(p.value.data_mut(), &grads, &mut self.m[slot], &mut self.v[slot], self.t, &self.config)?;
        }
        Ok(())
    }
}
