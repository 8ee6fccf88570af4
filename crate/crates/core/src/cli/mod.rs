//! The `moe-amc` command line: one JSON config drives generation, training,
//! evaluation and reporting.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! data/{full,train,val,test}.bin      dataset files
//! models/<model>.ckpt                 checkpoint
//! models/<model>.arch.json            architecture sidecar
//! history_<model>.csv                 per-epoch losses
//! metrics/<model>.json                test-split metrics
//! report/                             CSV tables and SVG chart
//! ```

mod selftest;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::models::{Architecture, ModelBundle, ModelError, ModelKind};
use crate::report::{self, ReportError, SnrMetrics};
use crate::rng;
use crate::sigsynth::{self, Dataset, DatasetSpec, SigError, DEFAULT_SPLIT};
use crate::tensorcore::TensorError;
use crate::trainer::{self, Precision, TrainConfig, TrainError};

pub use selftest::{run_selftest, SuiteResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_SELFTEST: i32 = 3;

/// Batch size used for evaluation passes.
const EVAL_BATCH: usize = 256;

fn default_models() -> Vec<ModelKind> {
    ModelKind::ALL.to_vec()
}

fn default_split() -> (f64, f64, f64) {
    DEFAULT_SPLIT
}

/// One experiment. `dataset.seed` and `train.seed` must be left unset:
/// both derive from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
    /// Relative paths resolve against the directory holding the config.
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        if cfg.out_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if self.models.is_empty() {
            return bad("`models` must list at least one of hsrm, lsrm, moe".into());
        }
        if self.dataset.seed != 0 || self.train.seed != 0 {
            return bad("dataset.seed and train.seed derive from the master `seed`; remove them".into());
        }
        if self.out_dir.as_os_str().is_empty() {
            return bad("`out_dir` is empty".into());
        }
        self.dataset.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(())
    }

    /// The dataset spec with its seed derived from the master seed.
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec { seed: rng::mix(self.seed, rng::role::DATASET), ..self.dataset.clone() }
    }

    pub fn split_seed(&self) -> u64 {
        rng::mix(self.seed, rng::role::SPLIT)
    }

    pub fn init_seed(&self) -> u64 {
        rng::mix(self.seed, rng::role::INIT)
    }

    pub fn train_config(&self, kind: ModelKind) -> TrainConfig {
        TrainConfig { seed: rng::mix(self.seed, rng::role::TRAIN), model_kind: kind, ..self.train.clone() }
    }

    pub fn data_path(&self, tag: &str) -> PathBuf {
        self.out_dir.join("data").join(format!("{tag}.bin"))
    }

    pub fn checkpoint_path(&self, kind: ModelKind) -> PathBuf {
        self.out_dir.join("models").join(format!("{}.ckpt", kind.name()))
    }

    pub fn history_path(&self, kind: ModelKind) -> PathBuf {
        self.out_dir.join(format!("history_{}.csv", kind.name()))
    }

    pub fn metrics_path(&self, kind: ModelKind) -> PathBuf {
        self.out_dir.join("metrics").join(format!("{}.json", kind.name()))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join("report")
    }
}

/// Contents of `metrics/<model>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: ModelKind,
    pub accuracy: f64,
    pub avg_accuracy: f64,
    pub loss: f64,
    pub metrics: SnrMetrics,
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
    Selftest(usize),
}

impl CliError {
    fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io(_) => EXIT_IO,
            CliError::Selftest(_) => EXIT_SELFTEST,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Io(m) => f.write_str(m),
            CliError::Selftest(n) => write!(f, "{n} selftest suite(s) failed"),
        }
    }
}

// File-level failures (missing, unreadable, corrupt) map to I/O; everything
// else is a validation error.

fn sig_err(path: &Path, e: SigError) -> CliError {
    match e {
        SigError::Io(_)
        | SigError::BadMagic
        | SigError::UnsupportedVersion(_)
        | SigError::Truncated
        | SigError::Checksum { .. }
        | SigError::Malformed(_) => CliError::io(path, e),
        e => CliError::Validation(e.to_string()),
    }
}

fn tensor_is_io(e: &TensorError) -> bool {
    matches!(
        e,
        TensorError::Io(_)
            | TensorError::BadMagic
            | TensorError::UnsupportedVersion(_)
            | TensorError::Truncated
            | TensorError::Checksum { .. }
            | TensorError::Malformed(_)
            | TensorError::MissingParam(_)
    )
}

fn model_err(path: &Path, e: ModelError) -> CliError {
    let io = match &e {
        ModelError::Io(_) | ModelError::Json(_) => true,
        ModelError::Tensor(t) => tensor_is_io(t),
        _ => false,
    };
    if io {
        CliError::io(path, e)
    } else {
        CliError::Validation(e.to_string())
    }
}

fn train_err(path: &Path, e: TrainError) -> CliError {
    match e {
        TrainError::Io(_) => CliError::io(path, e),
        TrainError::Model(m) => model_err(path, m),
        TrainError::Tensor(t) if tensor_is_io(&t) => CliError::io(path, t),
        e => CliError::Validation(e.to_string()),
    }
}

fn report_err(e: ReportError) -> CliError {
    match e {
        ReportError::Io { .. } => CliError::Io(e.to_string()),
        e => CliError::Validation(e.to_string()),
    }
}

#[derive(Parser, Debug)]
#[command(name = "moe-amc", version, about = "Mixture-of-experts modulation classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the dataset and its train/val/test splits.
    Generate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train one model on the train split with early stopping on val.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: ModelKind,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render CSV tables and the SVG chart from all available metrics.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the built-in oracle suites.
    Selftest,
}

/// Runs one command line (`argv[0]` is the program name) and returns the
/// process exit code.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Generate { config } => RunConfig::load(config).and_then(|c| generate(&c)),
        Command::Train { config, model } => RunConfig::load(config).and_then(|c| train(&c, model)),
        Command::Eval { config, model, checkpoint } => {
            RunConfig::load(config).and_then(|c| eval(&c, model, &checkpoint))
        }
        Command::Report { config } => RunConfig::load(config).and_then(|c| report(&c)),
        Command::Selftest => selftest(),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        _ => Ok(()),
    }
}

fn load_split(cfg: &RunConfig, tag: &str) -> Result<Dataset, CliError> {
    let path = cfg.data_path(tag);
    if !path.exists() {
        return Err(CliError::Io(format!("{} not found; run `generate` first", path.display())));
    }
    sigsynth::load_dataset(&path).map_err(|e| sig_err(&path, e))
}

/// Writes the full dataset and its three splits.
pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let full = sigsynth::generate_dataset(&cfg.dataset_spec()).map_err(|e| CliError::Validation(e.to_string()))?;
    let (tr, va, te) =
        sigsynth::split_dataset(&full, cfg.split, cfg.split_seed()).map_err(|e| CliError::Validation(e.to_string()))?;
    for ds in [&full, &tr, &va, &te] {
        let path = cfg.data_path(ds.split_tag.as_str());
        create_parent(&path)?;
        sigsynth::save_dataset(ds, &path).map_err(|e| sig_err(&path, e))?;
        println!("wrote {} ({} examples)", path.display(), ds.len());
    }
    Ok(())
}

fn check_listed(cfg: &RunConfig, kind: ModelKind) -> Result<(), CliError> {
    if cfg.models.contains(&kind) {
        Ok(())
    } else {
        Err(CliError::Validation(format!("model `{kind}` is not listed in the config's `models`")))
    }
}

/// Trains `kind` from a fresh initialization and writes its checkpoint and
/// history.
pub fn train(cfg: &RunConfig, kind: ModelKind) -> Result<(), CliError> {
    check_listed(cfg, kind)?;
    let tr = load_split(cfg, "train")?;
    let va = load_split(cfg, "val")?;
    let arch = Architecture::new(kind, cfg.dataset.frame_len, cfg.dataset.n_classes());
    let ckpt = cfg.checkpoint_path(kind);
    let mut bundle = ModelBundle::new(arch, cfg.init_seed()).map_err(|e| model_err(&ckpt, e))?;
    let tcfg = cfg.train_config(kind);
    let history = trainer::train_with(&mut bundle, &tr, &va, &tcfg, |r| {
        println!(
            "{kind} epoch {}: train_loss {:.6} val_loss {:.6} val_acc {:.4}",
            r.epoch, r.train_loss, r.val_loss, r.val_accuracy
        );
    })
    .map_err(|e| train_err(&ckpt, e))?;

    create_parent(&ckpt)?;
    bundle.save(&ckpt).map_err(|e| model_err(&ckpt, e))?;
    let hist = cfg.history_path(kind);
    create_parent(&hist)?;
    history.write_csv(&hist).map_err(|e| train_err(&hist, e))?;
    match history.best_epoch {
        Some(b) => println!("{kind}: best epoch {b}, checkpoint {}", ckpt.display()),
        None => println!("{kind}: no epochs run, checkpoint {}", ckpt.display()),
    }
    Ok(())
}

/// Evaluates a checkpoint on the test split.
pub fn eval(cfg: &RunConfig, kind: ModelKind, checkpoint: &Path) -> Result<(), CliError> {
    check_listed(cfg, kind)?;
    if !checkpoint.exists() {
        return Err(CliError::Io(format!("checkpoint {} not found", checkpoint.display())));
    }
    let bundle = ModelBundle::load(checkpoint).map_err(|e| model_err(checkpoint, e))?;
    if bundle.kind() != kind {
        return Err(CliError::Validation(format!(
            "checkpoint {} holds a {} model, not {kind}",
            checkpoint.display(),
            bundle.kind()
        )));
    }
    let te = load_split(cfg, "test")?;
    let ev = match cfg.train.precision {
        Precision::F32 => trainer::evaluate::<f32>(&bundle, &te, EVAL_BATCH),
        Precision::F64 => trainer::evaluate::<f64>(&bundle, &te, EVAL_BATCH),
    }
    .map_err(|e| train_err(checkpoint, e))?;
    let metrics = report::accuracy_by_snr(&ev.predictions, &te, ev.gate.as_deref()).map_err(report_err)?;
    let avg_accuracy = report::average_accuracy(&metrics).map_err(report_err)?;
    let record = EvalRecord { model: kind, accuracy: ev.accuracy, avg_accuracy, loss: ev.loss, metrics };

    let path = cfg.metrics_path(kind);
    create_parent(&path)?;
    let json = serde_json::to_string_pretty(&record).expect("metrics serialize");
    fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))?;
    println!("{kind}: test accuracy {:.4}, average over SNR bins {:.4}", ev.accuracy, avg_accuracy);
    Ok(())
}

/// Emits the report from every model of the config that has metrics.
pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let mut records = Vec::new();
    for &kind in &cfg.models {
        let path = cfg.metrics_path(kind);
        if !path.exists() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let rec: EvalRecord = serde_json::from_str(&text).map_err(|e| CliError::io(&path, e))?;
        records.push(rec);
    }
    if records.is_empty() {
        let dir = cfg.out_dir.join("metrics");
        return Err(CliError::Io(format!("no metrics in {}; run `eval` first", dir.display())));
    }
    let models: Vec<(&str, &SnrMetrics)> = records.iter().map(|r| (r.model.name(), &r.metrics)).collect();
    for path in report::emit_report(&models, cfg.report_dir()).map_err(report_err)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn selftest() -> Result<(), CliError> {
    let results = run_selftest();
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        let status = if r.passed { "pass" } else { "FAIL" };
        println!("{:width$}  {status}  {}", r.name, r.detail);
    }
    match results.iter().filter(|r| !r.passed).count() {
        0 => Ok(()),
        n => Err(CliError::Selftest(n)),
    }
}
