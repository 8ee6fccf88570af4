//! Synthetic labeled I/Q frames.
//!
//! A [`DatasetSpec`] describes a grid of (modulation scheme, SNR) cells. Each
//! cell receives `frames_per_cell` frames of random payload, rectangular
//! pulse shaping and complex AWGN. The random stream of the example at
//! global index `n` is seeded from `mix(spec.seed, n)`, so any example can
//! be regenerated on its own.

mod channel;
mod io;
mod scheme;

use rand::RngExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub use channel::{apply_awgn, mean_power};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use scheme::{modulate, ModulationScheme, CPFSK_MOD_INDEX};

#[derive(Debug, Error)]
pub enum SigError {
    #[error("unknown modulation scheme `{0}`")]
    UnknownScheme(String),
    #[error("{bits} bits is not a multiple of {bits_per_symbol} bits per symbol")]
    BitCount { bits: usize, bits_per_symbol: usize },
    #[error("bit {index} has value {value}, expected 0 or 1")]
    InvalidBit { index: usize, value: u8 },
    #[error("I and Q lengths differ ({i} vs {q})")]
    RaggedFrame { i: usize, q: usize },
    #[error("frame contains a non-finite sample")]
    NonFinite,
    #[error("frame has zero power, SNR is undefined")]
    ZeroPower,
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("invalid split ratios {0:?}: must be non-negative and sum to 1")]
    InvalidRatios((f64, f64, f64)),
    #[error("bad magic: not a dataset file")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One complex baseband frame stored as two real channels.
#[derive(Debug, Clone, PartialEq)]
pub struct IqFrame {
    i: Vec<f32>,
    q: Vec<f32>,
}

impl IqFrame {
    pub fn new(i: Vec<f32>, q: Vec<f32>) -> Result<Self, SigError> {
        if i.len() != q.len() {
            return Err(SigError::RaggedFrame { i: i.len(), q: q.len() });
        }
        if i.iter().chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(SigError::NonFinite);
        }
        Ok(Self { i, q })
    }

    pub fn zeros(len: usize) -> Self {
        Self { i: vec![0.0; len], q: vec![0.0; len] }
    }

    pub fn i(&self) -> &[f32] {
        &self.i
    }

    pub fn q(&self) -> &[f32] {
        &self.q
    }

    pub fn len(&self) -> usize {
        self.i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub frame: IqFrame,
    pub class_idx: usize,
    /// Ground-truth SNR. Stored at `f32` precision, the file format width.
    pub snr_db: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub schemes: Vec<ModulationScheme>,
    pub snr_grid_db: Vec<f64>,
    pub frame_len: usize,
    pub samples_per_symbol: usize,
    pub frames_per_cell: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            schemes: ModulationScheme::ALL.to_vec(),
            snr_grid_db: (0..11).map(|k| -20.0 + 4.0 * k as f64).collect(),
            frame_len: 128,
            samples_per_symbol: 8,
            frames_per_cell: 200,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), SigError> {
        let bad = |m: &str| Err(SigError::InvalidSpec(m.to_string()));
        if self.schemes.is_empty() {
            return bad("at least one modulation scheme is required");
        }
        if self.schemes.len() > u16::MAX as usize {
            return bad("too many schemes for a u16 class index");
        }
        for (k, s) in self.schemes.iter().enumerate() {
            if self.schemes[..k].contains(s) {
                return bad(&format!("scheme {s} listed twice"));
            }
        }
        if self.snr_grid_db.is_empty() {
            return bad("SNR grid is empty");
        }
        if self.snr_grid_db.iter().any(|v| !v.is_finite()) {
            return bad("SNR grid contains a non-finite value");
        }
        if self.snr_grid_db.windows(2).any(|w| w[0] >= w[1]) {
            return bad("SNR grid must be strictly increasing");
        }
        if self.samples_per_symbol == 0 {
            return bad("samples_per_symbol must be >= 1");
        }
        if self.frame_len == 0 || !self.frame_len.is_multiple_of(self.samples_per_symbol) {
            return bad("frame_len must be a positive multiple of samples_per_symbol");
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.schemes.len()
    }

    pub fn n_examples(&self) -> usize {
        self.schemes.len() * self.snr_grid_db.len() * self.frames_per_cell
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Full => "full",
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub spec: DatasetSpec,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes()
    }

    /// Subset by example index, keeping the spec.
    pub fn select(&self, indices: &[usize], tag: SplitTag) -> Dataset {
        Dataset {
            examples: indices.iter().map(|&k| self.examples[k].clone()).collect(),
            spec: self.spec.clone(),
            split_tag: tag,
        }
    }

    pub fn filter(&self, mut keep: impl FnMut(&LabeledExample) -> bool) -> Dataset {
        Dataset {
            examples: self.examples.iter().filter(|e| keep(e)).cloned().collect(),
            spec: self.spec.clone(),
            split_tag: self.split_tag,
        }
    }
}

/// Regenerates the example at global index `index` of `spec`.
///
/// Indices enumerate cells scheme-major, then SNR, then frame within the
/// cell.
pub fn generate_example(spec: &DatasetSpec, index: usize) -> Result<LabeledExample, SigError> {
    let per_scheme = spec.snr_grid_db.len() * spec.frames_per_cell;
    if index >= spec.n_examples() {
        return Err(SigError::InvalidSpec(format!("example index {index} out of range")));
    }
    let class_idx = index / per_scheme;
    let snr_idx = (index % per_scheme) / spec.frames_per_cell;
    let scheme = spec.schemes[class_idx];
    let snr_db = spec.snr_grid_db[snr_idx];

    let mut rng = rng::stream(spec.seed, index as u64);
    let n_bits = spec.frame_len / spec.samples_per_symbol * scheme.bits_per_symbol();
    // OOK can draw an all-zero payload, which has no defined SNR; such a
    // draw is repeated from the same stream.
    let clean = loop {
        let bits: Vec<u8> = (0..n_bits).map(|_| rng.random_range(0..2u8)).collect();
        let frame = modulate(&bits, scheme, spec.samples_per_symbol)?;
        if mean_power(&frame) > 0.0 {
            break frame;
        }
    };
    let frame = apply_awgn(&clean, snr_db, &mut rng)?;
    Ok(LabeledExample { frame, class_idx, snr_db: snr_db as f32 })
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, SigError> {
    spec.validate()?;
    let examples = (0..spec.n_examples())
        .map(|n| generate_example(spec, n))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { examples, spec: spec.clone(), split_tag: SplitTag::Full })
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// Shuffled train/val/test partition. Each split keeps the original example
/// order of its members.
pub fn split_dataset(
    ds: &Dataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), SigError> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !r.is_finite() || *r < 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(SigError::InvalidRatios(ratios));
    }
    use rand::seq::SliceRandom;
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::role::SPLIT));

    let n_train = ((n as f64 * a).round() as usize).min(n);
    let n_val = ((n as f64 * b).round() as usize).min(n - n_train);
    let mut parts = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ];
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok((
        ds.select(&parts[0], SplitTag::Train),
        ds.select(&parts[1], SplitTag::Val),
        ds.select(&parts[2], SplitTag::Test),
    ))
}
