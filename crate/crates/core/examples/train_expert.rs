//! Trains the convolutional expert alone and prints the per-epoch history.
//!
//! cargo run --example train_expert

use moe_amc::models::{Architecture, ModelBundle, ModelKind};
use moe_amc::sigsynth::{self, DatasetSpec, ModulationScheme};
use moe_amc::trainer::{self, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = DatasetSpec {
        schemes: vec![ModulationScheme::Bpsk, ModulationScheme::Qpsk, ModulationScheme::Psk8, ModulationScheme::Qam16],
        snr_grid_db: vec![10.0, 20.0],
        frames_per_cell: 60,
        seed: 11,
        ..DatasetSpec::default()
    };
    let ds = sigsynth::generate_dataset(&spec)?;
    let (train, val, test) = sigsynth::split_dataset(&ds, (0.7, 0.15, 0.15), 12)?;

    let mut bundle = ModelBundle::new(Architecture::new(ModelKind::Hsrm, spec.frame_len, spec.n_classes()), 13)?;
    let cfg = TrainConfig { max_epochs: 15, patience: 5, seed: 14, model_kind: ModelKind::Hsrm, ..TrainConfig::default() };
    let history = trainer::train_with(&mut bundle, &train, &val, &cfg, |r| {
        println!("epoch {:>2}  train {:.4}  val {:.4}  val acc {:.3}", r.epoch, r.train_loss, r.val_loss, r.val_accuracy)
    })?;
    println!("best epoch {:?}, stopped early: {}", history.best_epoch, history.stopped_early);

    let ev = trainer::evaluate::<f32>(&bundle, &test, 256)?;
    println!("test accuracy {:.3} (chance {:.3})", ev.accuracy, 1.0 / spec.n_classes() as f64);
    Ok(())
}
