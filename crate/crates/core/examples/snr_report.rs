//! Compares an untrained and a trained attention expert per SNR bin and
//! writes the CSV tables and SVG chart.
//!
//! cargo run --example snr_report -- [out_dir]

use moe_amc::models::{Architecture, ModelBundle, ModelKind};
use moe_amc::report::{self, accuracy_by_snr, average_accuracy};
use moe_amc::sigsynth::{self, DatasetSpec, ModulationScheme};
use moe_amc::trainer::{self, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "snr_report_out".into());
    let spec = DatasetSpec {
        schemes: vec![ModulationScheme::Bpsk, ModulationScheme::Qpsk, ModulationScheme::Ook],
        snr_grid_db: vec![-12.0, -6.0, 0.0, 6.0, 12.0],
        frames_per_cell: 40,
        seed: 31,
        ..DatasetSpec::default()
    };
    let ds = sigsynth::generate_dataset(&spec)?;
    let (train, val, test) = sigsynth::split_dataset(&ds, (0.6, 0.1, 0.3), 32)?;

    let arch = Architecture::new(ModelKind::Lsrm, spec.frame_len, spec.n_classes());
    let fresh = ModelBundle::new(arch.clone(), 33)?;
    let mut trained = ModelBundle::new(arch, 33)?;
    let cfg = TrainConfig { max_epochs: 20, patience: 5, seed: 34, model_kind: ModelKind::Lsrm, ..TrainConfig::default() };
    trainer::train(&mut trained, &train, &val, &cfg)?;

    let mut metrics = Vec::new();
    for bundle in [&fresh, &trained] {
        let ev = trainer::evaluate::<f32>(bundle, &test, 256)?;
        metrics.push(accuracy_by_snr(&ev.predictions, &test, None)?);
    }
    for (name, m) in ["untrained", "trained"].iter().zip(&metrics) {
        println!("{name}: average accuracy over SNR bins {:.3}", average_accuracy(m)?);
    }
    let models = [("untrained", &metrics[0]), ("trained", &metrics[1])];
    for path in report::emit_report(&models, &out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
