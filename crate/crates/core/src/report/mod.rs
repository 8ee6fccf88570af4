//! SNR-stratified evaluation metrics and their CSV/SVG rendering.
//!
//! Every emitted file is a pure function of the metrics passed in, so equal
//! metrics give byte-identical output.

mod svg;

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sigsynth::Dataset;

pub use svg::render_accuracy_svg;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{predictions} predictions for {examples} examples")]
    Alignment { predictions: usize, examples: usize },
    #[error("{gate} gate outputs for {examples} examples")]
    GateAlignment { gate: usize, examples: usize },
    #[error("gate output {0} outside [0, 1]")]
    GateRange(f64),
    #[error("predicted class {class} at example {index} but the dataset has {n_classes} classes")]
    Class { index: usize, class: usize, n_classes: usize },
    #[error("no SNR bins")]
    Empty,
    #[error("no metrics to report")]
    NoModels,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Counts for one SNR grid value. `total > 0` for every stored bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrBin {
    pub snr_db: f32,
    pub correct: u64,
    pub total: u64,
}

impl SnrBin {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrMetrics {
    /// Sorted by ascending SNR; only SNRs present in the dataset appear.
    pub per_snr: Vec<SnrBin>,
    pub class_names: Vec<String>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    /// Mean gate output per bin, aligned with `per_snr`. MoE models only.
    pub gate_mean_by_snr: Option<Vec<f64>>,
}

impl SnrMetrics {
    pub fn bin(&self, snr_db: f32) -> Option<&SnrBin> {
        self.per_snr.iter().find(|b| b.snr_db == snr_db)
    }

    pub fn total(&self) -> u64 {
        self.per_snr.iter().map(|b| b.total).sum()
    }

    /// Accuracy pooled over the examples of every bin accepted by `keep`.
    pub fn pooled_accuracy(&self, mut keep: impl FnMut(f32) -> bool) -> Option<f64> {
        let (c, t) = self
            .per_snr
            .iter()
            .filter(|b| keep(b.snr_db))
            .fold((0, 0), |(c, t), b| (c + b.correct, t + b.total));
        (t > 0).then(|| c as f64 / t as f64)
    }
}

fn by_snr(a: f32, b: f32) -> Ordering {
    a.total_cmp(&b)
}

/// Buckets `predictions` by the exact SNR of each example.
pub fn accuracy_by_snr(predictions: &[usize], ds: &Dataset, gate: Option<&[f64]>) -> Result<SnrMetrics, ReportError> {
    let n = ds.len();
    if predictions.len() != n {
        return Err(ReportError::Alignment { predictions: predictions.len(), examples: n });
    }
    if let Some(g) = gate {
        if g.len() != n {
            return Err(ReportError::GateAlignment { gate: g.len(), examples: n });
        }
        if let Some(&bad) = g.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ReportError::GateRange(bad));
        }
    }
    let k = ds.n_classes();
    let mut confusion = vec![vec![0u64; k]; k];
    let mut snrs: Vec<f32> = ds.examples.iter().map(|e| e.snr_db).collect();
    snrs.sort_by(|a, b| by_snr(*a, *b));
    snrs.dedup();
    let mut bins: Vec<SnrBin> = snrs.iter().map(|&snr_db| SnrBin { snr_db, correct: 0, total: 0 }).collect();
    let mut gate_sum = vec![0.0; bins.len()];

    for (index, (ex, &p)) in ds.examples.iter().zip(predictions).enumerate() {
        if p >= k || ex.class_idx >= k {
            let class = if p >= k { p } else { ex.class_idx };
            return Err(ReportError::Class { index, class, n_classes: k });
        }
        let b = snrs.binary_search_by(|s| by_snr(*s, ex.snr_db)).expect("bin of a listed SNR");
        bins[b].total += 1;
        bins[b].correct += u64::from(p == ex.class_idx);
        confusion[ex.class_idx][p] += 1;
        if let Some(g) = gate {
            gate_sum[b] += g[index];
        }
    }
    let gate_mean_by_snr = gate.map(|_| gate_sum.iter().zip(&bins).map(|(s, b)| s / b.total as f64).collect());
    Ok(SnrMetrics {
        per_snr: bins,
        class_names: ds.spec.schemes.iter().map(|s| s.name().to_string()).collect(),
        confusion,
        gate_mean_by_snr,
    })
}

/// Unweighted mean of the per-bin accuracies.
pub fn average_accuracy(m: &SnrMetrics) -> Result<f64, ReportError> {
    if m.per_snr.is_empty() {
        return Err(ReportError::Empty);
    }
    Ok(m.per_snr.iter().map(SnrBin::accuracy).sum::<f64>() / m.per_snr.len() as f64)
}

/// Spearman rank correlation, ties receiving their average rank.
/// `None` when either input is constant or the lengths differ.
pub fn rank_correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let mean = (x.len() as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        // Positions i..=j tie; 1-based average rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

fn sorted_snrs(models: &[(&str, &SnrMetrics)]) -> Vec<f32> {
    let mut s: Vec<f32> = models.iter().flat_map(|(_, m)| m.per_snr.iter().map(|b| b.snr_db)).collect();
    s.sort_by(|a, b| by_snr(*a, *b));
    s.dedup();
    s
}

/// `accuracy_by_snr.csv`: one row per SNR in the union of all bins. A model
/// without a bin leaves its cell empty.
pub fn accuracy_csv(models: &[(&str, &SnrMetrics)]) -> String {
    let gated = models.iter().find_map(|(_, m)| m.gate_mean_by_snr.as_ref().map(|g| (m, g)));
    let mut out = String::from("snr_db");
    for (name, _) in models {
        write!(out, ",{name}").unwrap();
    }
    if gated.is_some() {
        out.push_str(",moe_gate_mean");
    }
    out.push('\n');
    for snr in sorted_snrs(models) {
        write!(out, "{snr}").unwrap();
        for (_, m) in models {
            match m.bin(snr) {
                Some(b) => write!(out, ",{:.6}", b.accuracy()).unwrap(),
                None => out.push(','),
            }
        }
        if let Some((m, g)) = gated {
            match m.per_snr.iter().position(|b| b.snr_db == snr) {
                Some(i) => write!(out, ",{:.6}", g[i]).unwrap(),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Rows are true classes, columns predicted classes.
pub fn confusion_csv(m: &SnrMetrics) -> String {
    let mut out = String::from("true");
    for c in &m.class_names {
        write!(out, ",{c}").unwrap();
    }
    out.push('\n');
    for (c, row) in m.class_names.iter().zip(&m.confusion) {
        out.push_str(c);
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn summary_csv(models: &[(&str, &SnrMetrics)]) -> Result<String, ReportError> {
    let mut out = String::from("model,avg_accuracy\n");
    for (name, m) in models {
        writeln!(out, "{name},{:.6}", average_accuracy(m)?).unwrap();
    }
    Ok(out)
}

/// Writes the CSV tables and the chart into `out_dir`, returning the paths
/// written in order.
pub fn emit_report(models: &[(&str, &SnrMetrics)], out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, ReportError> {
    if models.is_empty() {
        return Err(ReportError::NoModels);
    }
    let dir = out_dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;

    let mut files = vec![("accuracy_by_snr.csv".to_string(), accuracy_csv(models))];
    for (name, m) in models {
        files.push((format!("confusion_{name}.csv"), confusion_csv(m)));
    }
    files.push(("summary.csv".to_string(), summary_csv(models)?));
    files.push(("accuracy_by_snr.svg".to_string(), render_accuracy_svg(models)));

    let mut written = Vec::with_capacity(files.len());
    for (file, body) in files {
        let path = dir.join(file);
        fs::write(&path, body).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}
