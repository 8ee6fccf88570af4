//! Generates a small labeled I/Q dataset, splits it, and round-trips it
//! through the binary file format.
//!
//! cargo run --example synthesize_dataset

use moe_amc::sigsynth::{self, mean_power, DatasetSpec, ModulationScheme, DEFAULT_SPLIT};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = DatasetSpec {
        schemes: vec![ModulationScheme::Bpsk, ModulationScheme::Qam16, ModulationScheme::Cpfsk2],
        snr_grid_db: vec![-10.0, 0.0, 10.0, 20.0],
        frames_per_cell: 50,
        seed: 2024,
        ..DatasetSpec::default()
    };
    let ds = sigsynth::generate_dataset(&spec)?;
    println!("{} frames of {} samples", ds.len(), spec.frame_len);

    // Received power is signal plus noise: 1 + 10^(-snr/10) for unit-power schemes.
    for &snr in &spec.snr_grid_db {
        let cell = ds.filter(|e| e.snr_db == snr as f32);
        let p = cell.examples.iter().map(|e| mean_power(&e.frame)).sum::<f64>() / cell.len() as f64;
        println!("{snr:>6} dB  mean received power {p:.3}  expected {:.3}", 1.0 + 10f64.powf(-snr / 10.0));
    }

    let (train, val, test) = sigsynth::split_dataset(&ds, DEFAULT_SPLIT, 7)?;
    println!("split: train {} / val {} / test {}", train.len(), val.len(), test.len());

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("train.bin");
    sigsynth::save_dataset(&train, &path)?;
    let back = sigsynth::load_dataset(&path)?;
    assert_eq!(back, train);
    println!("{} bytes written and read back identically", std::fs::metadata(&path)?.len());
    Ok(())
}
