//! Drives the command-line pipeline (generate, train and eval for each
//! model, report) from one config file, as `moe-amc` would.
//!
//! cargo run --example full_pipeline

use moe_amc::cli::run_cli;

const CONFIG: &str = r#"{
  "seed": 5,
  "out_dir": "run",
  "models": ["hsrm", "lsrm", "moe"],
  "dataset": {
    "schemes": ["BPSK", "QPSK", "QAM16", "CPFSK2"],
    "snr_grid_db": [-10, 0, 10, 20],
    "frame_len": 128,
    "samples_per_symbol": 8,
    "frames_per_cell": 30
  },
  "train": { "max_epochs": 6, "patience": 3, "batch_size": 32 }
}"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let config = dir.path().join("run.json");
    std::fs::write(&config, CONFIG)?;
    let c = config.to_str().expect("utf-8 path");
    let run = |args: &[&str]| {
        let code = run_cli(std::iter::once("moe-amc").chain(args.iter().copied()));
        assert_eq!(code, 0, "{args:?} failed");
    };

    run(&["generate", "--config", c]);
    for model in ["hsrm", "lsrm", "moe"] {
        run(&["train", "--config", c, "--model", model]);
        let ckpt = dir.path().join(format!("run/models/{model}.ckpt"));
        run(&["eval", "--config", c, "--model", model, "--checkpoint", ckpt.to_str().unwrap()]);
    }
    run(&["report", "--config", c]);
    print!("{}", std::fs::read_to_string(dir.path().join("run/report/summary.csv"))?);
    print!("{}", std::fs::read_to_string(dir.path().join("run/report/accuracy_by_snr.csv"))?);
    Ok(())
}
