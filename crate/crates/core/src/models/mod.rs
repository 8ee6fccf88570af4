//! The two experts, the gate, and their soft mixture.
//!
//! All networks read the same `[B, 2, L]` input built by [`preprocess`]:
//! I and Q as two channels, scaled to unit average power. [`ModelBundle`]
//! owns one [`ParamStore`] whose names are prefixed `hsrm.`, `lsrm.` or
//! `gate.`, and builds the graph for any of the three model kinds.

mod gate;
mod hsrm;
pub mod layers;
mod lsrm;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::sigsynth::IqFrame;
use crate::tensorcore::{self, Graph, NormMode, ParamStore, Real, Tensor, TensorError, Var};

pub use gate::{Gate, GateConfig};
pub use hsrm::{Hsrm, HsrmConfig, ResidualUnit};
pub use lsrm::{EncoderBlock, Lsrm, LsrmConfig, PATCH_LEN};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("frame length {got} does not match model input length {expected}")]
    FrameLength { expected: usize, got: usize },
    #[error("unknown model kind `{0}`")]
    UnknownKind(String),
    #[error("architecture file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Guards against zero-power frames when normalizing.
pub const POWER_EPS: f64 = 1e-12;

/// Checks that `x` is `[B, 2, input_len]` and returns `B`.
pub(crate) fn check_input<T: Real>(g: &Graph<T>, x: Var, input_len: usize) -> Result<usize, ModelError> {
    match *g.shape(x) {
        [b, 2, l] if l == input_len => Ok(b),
        [_, 2, l] => Err(ModelError::FrameLength { expected: input_len, got: l }),
        ref s => Err(TensorError::Shape(format!("expected [B, 2, {input_len}] input, got {s:?}")).into()),
    }
}

fn preprocess_into<T: Real>(frame: &IqFrame, input_len: usize, out: &mut [T]) -> Result<(), ModelError> {
    if frame.len() != input_len {
        return Err(ModelError::FrameLength { expected: input_len, got: frame.len() });
    }
    let energy: f64 = frame.i().iter().zip(frame.q()).map(|(&i, &q)| (i as f64).powi(2) + (q as f64).powi(2)).sum();
    let scale = 1.0 / (energy / input_len.max(1) as f64).sqrt().max(POWER_EPS);
    let (oi, oq) = out.split_at_mut(input_len);
    for (o, &v) in oi.iter_mut().zip(frame.i()) {
        *o = T::cst(v as f64 * scale);
    }
    for (o, &v) in oq.iter_mut().zip(frame.q()) {
        *o = T::cst(v as f64 * scale);
    }
    Ok(())
}

/// `[2, L]` tensor of the frame normalized to unit average power.
pub fn preprocess(frame: &IqFrame, input_len: usize) -> Result<Tensor<f64>, ModelError> {
    let mut data = vec![0.0; 2 * input_len];
    preprocess_into(frame, input_len, &mut data)?;
    Ok(Tensor::new(vec![2, input_len], data)?)
}

/// `[B, 2, L]` batch of preprocessed frames.
pub fn preprocess_batch<'a, T: Real>(frames: impl IntoIterator<Item = &'a IqFrame>, input_len: usize) -> Result<Tensor<T>, ModelError> {
    let mut data = Vec::new();
    let mut b = 0;
    for f in frames {
        data.resize(data.len() + 2 * input_len, T::zero());
        let start = data.len() - 2 * input_len;
        preprocess_into(f, input_len, &mut data[start..])?;
        b += 1;
    }
    Ok(Tensor::new(vec![b, 2, input_len], data)?)
}

/// Per-row argmax; the lowest index wins ties.
pub fn classify<T: Real>(probs: &Tensor<T>) -> Vec<usize> {
    let k = probs.shape().last().copied().unwrap_or(0).max(1);
    probs
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `g·y_high + (1 − g)·y_low`, with the `[B]` gate broadcast over classes.
pub fn moe_mix<T: Real>(g: &mut Graph<T>, y_high: Var, y_low: Var, gate: Var) -> Result<Var, TensorError> {
    let a = g.scale_rows(y_high, gate)?;
    let rest = g.affine(gate, -1.0, 1.0)?;
    let b = g.scale_rows(y_low, rest)?;
    g.add(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Hsrm,
    Lsrm,
    Moe,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Hsrm, ModelKind::Lsrm, ModelKind::Moe];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Hsrm => "hsrm",
            ModelKind::Lsrm => "lsrm",
            ModelKind::Moe => "moe",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hsrm" => Ok(ModelKind::Hsrm),
            "lsrm" => Ok(ModelKind::Lsrm),
            "moe" | "moe-amc" | "moe_amc" => Ok(ModelKind::Moe),
            _ => Err(ModelError::UnknownKind(s.to_string())),
        }
    }
}

/// Self-describing architecture, stored as JSON next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub kind: ModelKind,
    pub input_len: usize,
    pub n_classes: usize,
    pub gate: GateConfig,
    pub hsrm: HsrmConfig,
    pub lsrm: LsrmConfig,
}

impl Architecture {
    pub fn new(kind: ModelKind, input_len: usize, n_classes: usize) -> Self {
        Self {
            kind,
            input_len,
            n_classes,
            gate: GateConfig::default(),
            hsrm: HsrmConfig::new(n_classes),
            lsrm: LsrmConfig::new(n_classes),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hsrm.n_classes != self.n_classes || self.lsrm.n_classes != self.n_classes {
            return Err(ModelError::Config(format!(
                "class counts disagree: bundle {}, hsrm {}, lsrm {}",
                self.n_classes, self.hsrm.n_classes, self.lsrm.n_classes
            )));
        }
        if self.kind != ModelKind::Lsrm {
            self.hsrm.validate(self.input_len)?;
        }
        if self.kind != ModelKind::Hsrm {
            self.lsrm.validate(self.input_len)?;
        }
        Ok(())
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[B, K]` class probabilities.
    pub probs: Var,
    /// `[B]` high-SNR probability (mixture only).
    pub gate: Option<Var>,
    /// `[B, K]` outputs of the convolutional and attention experts (mixture only).
    pub experts: Option<(Var, Var)>,
}

/// Result of batched inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[N, K]` class probabilities.
    pub probs: Tensor<f64>,
    pub gate: Option<Vec<f64>>,
}

impl Prediction {
    pub fn classes(&self) -> Vec<usize> {
        classify(&self.probs)
    }
}

/// A model of any [`ModelKind`] together with its parameters.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub arch: Architecture,
    pub store: ParamStore,
    pub hsrm: Option<Hsrm>,
    pub lsrm: Option<Lsrm>,
    pub gate: Option<Gate>,
}

impl ModelBundle {
    /// Builds and initializes a model from `stream(seed, INIT)`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = rng::stream(seed, rng::role::INIT);
        let mut store = ParamStore::new();
        let kind = arch.kind;
        let gate = match kind {
            ModelKind::Moe => Some(Gate::new(&mut store, &mut rng, "gate", &arch.gate, arch.input_len)?),
            _ => None,
        };
        let hsrm = match kind {
            ModelKind::Lsrm => None,
            _ => Some(Hsrm::new(&mut store, &mut rng, "hsrm", &arch.hsrm, arch.input_len)?),
        };
        let lsrm = match kind {
            ModelKind::Hsrm => None,
            _ => Some(Lsrm::new(&mut store, &mut rng, "lsrm", &arch.lsrm, arch.input_len)?),
        };
        Ok(Self { arch, store, hsrm, lsrm, gate })
    }

    /// Redraws the expert output layers, zero at initialization, from
    /// Xavier. At the initial point both experts predict uniformly, so the
    /// gate and every hidden expert weight get exactly zero gradient; this
    /// moves the model to a generic point for gradient checks.
    pub fn desymmetrize(&mut self, seed: u64) {
        let mut rng = rng::stream(seed, rng::role::GRADCHECK);
        for name in ["hsrm.head.2.w", "lsrm.head.2.w"] {
            if let Some(id) = self.store.id(name) {
                let shape = self.store.value(id).shape().to_vec();
                let bound = layers::Init::Xavier.bound(shape[0], shape[1]);
                *self.store.value_mut(id) = layers::uniform(&mut rng, &shape, bound);
            }
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_len
    }

    pub fn n_classes(&self) -> usize {
        self.arch.n_classes
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, mode: NormMode) -> Result<Forward, ModelError> {
        self.forward_with(g, &self.store, x, mode)
    }

    /// [`forward`](Self::forward) reading parameters from `s`, which must
    /// hold this bundle's names in the same order (a perturbed copy of
    /// `self.store`, as inside a gradient check).
    pub fn forward_with<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore, x: Var, mode: NormMode) -> Result<Forward, ModelError> {
        match (&self.hsrm, &self.lsrm, &self.gate) {
            (Some(h), None, _) => Ok(Forward { probs: h.forward(g, s, x, mode)?, gate: None, experts: None }),
            (None, Some(l), _) => Ok(Forward { probs: l.forward(g, s, x, mode)?, gate: None, experts: None }),
            (Some(h), Some(l), Some(gt)) => {
                let y_high = gt.forward(g, s, x)?;
                let yh = h.forward(g, s, x, mode)?;
                let yl = l.forward(g, s, x, mode)?;
                let probs = moe_mix(g, yh, yl, y_high)?;
                Ok(Forward { probs, gate: Some(y_high), experts: Some((yh, yl)) })
            }
            _ => Err(ModelError::Config("bundle is missing a sub-network".into())),
        }
    }

    /// Eval-mode inference over `frames` in chunks of `batch`.
    pub fn predict<T: Real>(&self, frames: &[&IqFrame], batch: usize) -> Result<Prediction, ModelError> {
        let k = self.n_classes();
        let mut probs = Vec::with_capacity(frames.len() * k);
        let mut gate = self.gate.as_ref().map(|_| Vec::with_capacity(frames.len()));
        for chunk in frames.chunks(batch.max(1)) {
            let mut g = Graph::<T>::new();
            let x = g.input(preprocess_batch(chunk.iter().copied(), self.input_len())?)?;
            let out = self.forward(&mut g, x, NormMode::Eval)?;
            probs.extend(g.value(out.probs).data().iter().map(|v| v.as_f64()));
            if let (Some(gs), Some(v)) = (gate.as_mut(), out.gate) {
                gs.extend(g.value(v).data().iter().map(|v| v.as_f64()));
            }
        }
        Ok(Prediction { probs: Tensor::new(vec![frames.len(), k], probs)?, gate })
    }

    /// Sidecar path holding the architecture for checkpoint `ckpt`.
    pub fn arch_path(ckpt: &Path) -> PathBuf {
        ckpt.with_extension("arch.json")
    }

    /// Writes the checkpoint and its architecture sidecar.
    pub fn save(&self, ckpt: impl AsRef<Path>) -> Result<(), ModelError> {
        let ckpt = ckpt.as_ref();
        tensorcore::save_checkpoint(&self.store, ckpt)?;
        std::fs::write(Self::arch_path(ckpt), serde_json::to_string_pretty(&self.arch)?)?;
        Ok(())
    }

    pub fn load(ckpt: impl AsRef<Path>) -> Result<Self, ModelError> {
        let ckpt = ckpt.as_ref();
        let arch: Architecture = serde_json::from_str(&std::fs::read_to_string(Self::arch_path(ckpt))?)?;
        let stored = tensorcore::load_checkpoint(ckpt)?;
        Self::from_parts(arch, &stored)
    }

    /// Rebuilds a bundle for `arch` and takes every value from `stored`,
    /// which must hold exactly the bundle's parameter names.
    pub fn from_parts(arch: Architecture, stored: &ParamStore) -> Result<Self, ModelError> {
        let mut bundle = Self::new(arch, 0)?;
        if stored.len() != bundle.store.len() {
            return Err(ModelError::Config(format!(
                "checkpoint holds {} tensors, architecture expects {}",
                stored.len(),
                bundle.store.len()
            )));
        }
        bundle.store.copy_values_from(stored)?;
        Ok(bundle)
    }
}
