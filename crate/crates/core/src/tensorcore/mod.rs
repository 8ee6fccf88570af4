//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Parameters live in a [`ParamStore`] as `f64` master copies. A forward
//! pass builds a [`Graph`] over an element type `T` (`f64` for gradient
//! checks, `f32` for training), and [`Graph::backward`] accumulates
//! gradients back into the store.

mod checkpoint;
mod gradcheck;
mod graph;
mod ops;
mod params;
mod real;
mod tensor;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckOpts, GradCheckReport};
pub use graph::{Graph, NormMode, Var};
pub use ops::{BatchNormOpts, MhaWeights, RunningStats, CE_CLAMP, LAYER_NORM_EPS};
pub use params::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} needs {} elements, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("probability row sums to {0}, expected 1")]
    NotProbabilities(f64),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("parameter `{0}` missing from checkpoint")]
    MissingParam(String),
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
