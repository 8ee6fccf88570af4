//! Trains the full mixture and shows how the gate routes frames by SNR.
//!
//! cargo run --example moe_routing

use moe_amc::models::{Architecture, ModelBundle, ModelKind};
use moe_amc::sigsynth::{self, DatasetSpec, ModulationScheme};
use moe_amc::trainer::{self, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = DatasetSpec {
        schemes: vec![ModulationScheme::Bpsk, ModulationScheme::Qpsk, ModulationScheme::Qam16, ModulationScheme::Ask4],
        snr_grid_db: vec![-16.0, -8.0, 0.0, 8.0, 16.0],
        frames_per_cell: 40,
        seed: 21,
        ..DatasetSpec::default()
    };
    let ds = sigsynth::generate_dataset(&spec)?;
    let (train, val, test) = sigsynth::split_dataset(&ds, (0.7, 0.1, 0.2), 22)?;

    let mut bundle = ModelBundle::new(Architecture::new(ModelKind::Moe, spec.frame_len, spec.n_classes()), 23)?;
    let cfg = TrainConfig { max_epochs: 12, patience: 4, seed: 24, ..TrainConfig::default() };
    let h = trainer::train(&mut bundle, &train, &val, &cfg)?;
    println!("trained {} epochs, best {:?}", h.records.len(), h.best_epoch);

    let ev = trainer::evaluate::<f32>(&bundle, &test, 256)?;
    let gate = ev.gate.expect("mixture reports gate outputs");
    println!("snr_db  accuracy  mean y_high");
    for &snr in &spec.snr_grid_db {
        let idx: Vec<usize> = (0..test.len()).filter(|&k| test.examples[k].snr_db == snr as f32).collect();
        let acc = idx.iter().filter(|&&k| ev.predictions[k] == test.examples[k].class_idx).count() as f64 / idx.len() as f64;
        let g = idx.iter().map(|&k| gate[k]).sum::<f64>() / idx.len() as f64;
        println!("{snr:>6}  {acc:>8.3}  {g:>11.3}");
    }
    Ok(())
}
