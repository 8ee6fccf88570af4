use proptest::prelude::*;

use super::*;
use crate::models::{Architecture, GateConfig, HsrmConfig, LsrmConfig};
use crate::sigsynth::{generate_dataset, DatasetSpec, ModulationScheme};

fn spec(schemes: &[ModulationScheme], snrs: &[f64], len: usize, per_cell: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        schemes: schemes.to_vec(),
        snr_grid_db: snrs.to_vec(),
        frame_len: len,
        samples_per_symbol: 8,
        frames_per_cell: per_cell,
        seed,
    }
}

fn tiny(kind: ModelKind, k: usize) -> Architecture {
    Architecture {
        kind,
        input_len: 32,
        n_classes: k,
        gate: GateConfig { hidden: (8, 4) },
        hsrm: HsrmConfig { n_stacks: 2, units_per_stack: 1, channels: 4, kernel: 3, head_hidden: (8, 6), n_classes: k },
        lsrm: LsrmConfig { d_model: 8, n_heads: 2, ffn_hidden: 12, head_hidden: (8, 6), n_classes: k },
    }
}

fn small_data(seed: u64) -> (Dataset, Dataset) {
    use ModulationScheme::*;
    let s = spec(&[Bpsk, Qpsk, Ook], &[0.0, 10.0], 32, 6, seed);
    let ds = generate_dataset(&s).unwrap();
    let val = ds.filter(|e| e.snr_db == 10.0);
    (ds, val)
}

fn quick(kind: ModelKind, epochs: usize) -> TrainConfig {
    TrainConfig { batch_size: 8, max_epochs: epochs, patience: epochs.min(5), seed: 11, model_kind: kind, ..Default::default() }
}

// Adam -----------------------------------------------------------------

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut p = vec![0.3, -1.2, 4.0];
    let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
    adam_step(&mut p, &[0.0; 3], &mut m, &mut v, 1, &AdamConfig::default()).unwrap();
    assert_eq!(p, vec![0.3, -1.2, 4.0]);
}

#[test]
fn adam_first_step_magnitude() {
    let mut p = vec![0.0];
    let (mut m, mut v) = (vec![0.0], vec![0.0]);
    adam_step(&mut p, &[1.0], &mut m, &mut v, 1, &AdamConfig::default()).unwrap();
    // m̂ = v̂ = 1, so the step is lr / (1 + ε).
    assert!((p[0] - (-1e-3 / (1.0 + 1e-8))).abs() < 1e-18);
    assert!((p[0] + 9.99999999e-4).abs() < 1e-10);
}

#[test]
fn adam_rejects_mismatched_state() {
    let mut p = vec![0.0; 2];
    let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 2]);
    assert!(matches!(adam_step(&mut p, &[1.0, 1.0], &mut m, &mut v, 1, &AdamConfig::default()), Err(TrainError::Shape(_))));
    let mut m = vec![0.0; 2];
    assert!(matches!(adam_step(&mut p, &[1.0, 1.0], &mut m, &mut v, 0, &AdamConfig::default()), Err(TrainError::Config(_))));
}

proptest! {
    #[test]
    fn adam_first_step_opposes_gradient(g in proptest::collection::vec(-1e3f64..1e3, 1..16)) {
        let n = g.len();
        let mut p = vec![0.0; n];
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        adam_step(&mut p, &g, &mut m, &mut v, 1, &AdamConfig::default()).unwrap();
        for (pk, gk) in p.iter().zip(&g) {
            if *gk != 0.0 {
                prop_assert!(pk.signum() == -gk.signum());
            } else {
                prop_assert_eq!(*pk, 0.0);
            }
        }
    }
}

#[test]
fn optimizer_state_is_per_model() {
    let (train_ds, _) = small_data(1);
    let make = |seed| ModelBundle::new(tiny(ModelKind::Moe, 3), seed).unwrap();
    let batches: Vec<Vec<usize>> = (0..4).map(|k| (k * 4..k * 4 + 8).collect()).collect();
    let step = |b: &mut ModelBundle, opt: &mut Adam, idx: &[usize]| {
        let frames = idx.iter().map(|&k| &train_ds.examples[k].frame);
        let x = preprocess_batch::<f64>(frames, 32).unwrap();
        let labels: Vec<usize> = idx.iter().map(|&k| train_ds.examples[k].class_idx).collect();
        train_step(b, opt, x, &labels).unwrap();
    };

    let (mut a, mut b) = (make(1), make(2));
    let (mut oa, mut ob) = (Adam::new(&a.store, AdamConfig::default()), Adam::new(&b.store, AdamConfig::default()));
    for idx in &batches {
        step(&mut a, &mut oa, idx);
        step(&mut b, &mut ob, idx);
    }
    let (mut a2, mut b2) = (make(1), make(2));
    let (mut oa2, mut ob2) = (Adam::new(&a2.store, AdamConfig::default()), Adam::new(&b2.store, AdamConfig::default()));
    for idx in &batches {
        step(&mut a2, &mut oa2, idx);
    }
    for idx in &batches {
        step(&mut b2, &mut ob2, idx);
    }
    assert_eq!(a.store.snapshot(), a2.store.snapshot());
    assert_eq!(b.store.snapshot(), b2.store.snapshot());
    assert_eq!(oa.steps(), 4);
}

// Early stopping ---------------------------------------------------------

/// Feeds `losses` until the stopper says stop; returns (last epoch, best epoch).
fn replay(patience: usize, losses: &[f64]) -> (Option<usize>, Option<usize>) {
    let mut es = EarlyStopping::new(patience);
    for (epoch, &l) in losses.iter().enumerate() {
        if es.observe(epoch, l) == Verdict::Stop {
            return (Some(epoch), es.best_epoch());
        }
    }
    (None, es.best_epoch())
}

#[test]
fn early_stop_patience_two() {
    // Epochs are 0-based: the minimum is first reached by the second epoch.
    assert_eq!(replay(2, &[3.0, 2.0, 2.0, 2.0, 2.0]), (Some(3), Some(1)));
}

#[test]
fn early_stop_patience_one() {
    assert_eq!(replay(1, &[5.0, 4.0, 4.5]), (Some(2), Some(1)));
    assert_eq!(replay(1, &[5.0, 4.0, 3.0]), (None, Some(2)));
}

#[test]
fn early_stop_patience_thirty() {
    let mut losses: Vec<f64> = (0..10).map(|k| 10.0 - k as f64).collect();
    losses.extend(std::iter::repeat_n(1.0, 29));
    assert_eq!(replay(30, &losses), (None, Some(9)));
    losses.push(1.5);
    assert_eq!(replay(30, &losses), (Some(39), Some(9)));
    // An improvement resets the count.
    let mut reset = losses[..35].to_vec();
    reset.push(0.5);
    reset.extend(std::iter::repeat_n(0.7, 30));
    assert_eq!(replay(30, &reset), (Some(65), Some(35)));
}

#[test]
fn non_finite_validation_loss_never_counts_as_improvement() {
    assert_eq!(replay(2, &[f64::NAN, f64::NAN]), (Some(1), None));
}

// Training loop ------------------------------------------------------------

#[test]
fn zero_epochs_returns_initial_parameters() {
    let (tr, va) = small_data(2);
    let mut bundle = ModelBundle::new(tiny(ModelKind::Moe, 3), 3).unwrap();
    let before = bundle.store.clone();
    let cfg = TrainConfig { max_epochs: 0, patience: 0, ..quick(ModelKind::Moe, 0) };
    let h = train(&mut bundle, &tr, &va, &cfg).unwrap();
    assert!(h.records.is_empty());
    assert_eq!(h.best_epoch, None);
    assert_eq!(bundle.store, before);
}

#[test]
fn training_is_bitwise_deterministic() {
    let (tr, va) = small_data(4);
    for kind in ModelKind::ALL {
        let run = || {
            let mut bundle = ModelBundle::new(tiny(kind, 3), 5).unwrap();
            let h = train(&mut bundle, &tr, &va, &quick(kind, 3)).unwrap();
            (h, bundle.store.snapshot())
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1.records.len(), 3);
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
        assert_eq!(h1.to_csv(), h2.to_csv());
    }
}

#[test]
fn shuffle_seed_changes_the_run() {
    let (tr, va) = small_data(6);
    let run = |seed| {
        let mut bundle = ModelBundle::new(tiny(ModelKind::Hsrm, 3), 5).unwrap();
        train(&mut bundle, &tr, &va, &TrainConfig { seed, ..quick(ModelKind::Hsrm, 2) }).unwrap()
    };
    assert_ne!(run(1).records, run(2).records);
}

#[test]
fn snr_labels_are_never_read() {
    let (tr, va) = small_data(7);
    let mut scrambled = tr.clone();
    for (k, e) in scrambled.examples.iter_mut().enumerate() {
        e.snr_db = -99.0 - k as f32;
    }
    let run = |ds: &Dataset| {
        let mut bundle = ModelBundle::new(tiny(ModelKind::Moe, 3), 8).unwrap();
        train(&mut bundle, ds, &va, &quick(ModelKind::Moe, 2)).unwrap()
    };
    assert_eq!(run(&tr), run(&scrambled));
}

#[test]
fn restores_best_validation_epoch() {
    let (tr, va) = small_data(9);
    let mut bundle = ModelBundle::new(tiny(ModelKind::Hsrm, 3), 10).unwrap();
    let cfg = TrainConfig { max_epochs: 6, patience: 6, ..quick(ModelKind::Hsrm, 6) };
    let h = train(&mut bundle, &tr, &va, &cfg).unwrap();
    let best = h.best_epoch.unwrap();
    let min = h.records.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(h.records[best].val_loss, min);
    assert!(h.records[..best].iter().all(|r| r.val_loss > min));
    // The restored parameters reproduce the best epoch's validation loss.
    let ev = evaluate::<f32>(&bundle, &va, 256).unwrap();
    assert_eq!(ev.loss, h.records[best].val_loss);
}

#[test]
fn rejects_bad_inputs() {
    let (tr, va) = small_data(12);
    let mut bundle = ModelBundle::new(tiny(ModelKind::Hsrm, 2), 0).unwrap();
    assert!(matches!(train(&mut bundle, &tr, &va, &quick(ModelKind::Hsrm, 1)), Err(TrainError::Label { n_classes: 2, .. })));
    let mut bundle = ModelBundle::new(tiny(ModelKind::Hsrm, 3), 0).unwrap();
    let empty = tr.filter(|_| false);
    assert!(matches!(train(&mut bundle, &empty, &va, &quick(ModelKind::Hsrm, 1)), Err(TrainError::EmptyDataset(_))));
    assert!(matches!(evaluate::<f64>(&bundle, &empty, 8), Err(TrainError::EmptyDataset(_))));
    for bad in [
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { patience: 101, ..Default::default() },
        TrainConfig { lr: -1.0, ..Default::default() },
    ] {
        assert!(matches!(train(&mut bundle, &tr, &va, &bad), Err(TrainError::Config(_))));
    }
}

#[test]
fn config_json_defaults_and_paper_scale() {
    let cfg: TrainConfig = serde_json::from_str(r#"{"model_kind": "lsrm", "seed": 3}"#).unwrap();
    assert_eq!(cfg, TrainConfig { model_kind: ModelKind::Lsrm, seed: 3, ..Default::default() });
    assert!(serde_json::from_str::<TrainConfig>(r#"{"batchsize": 3}"#).is_err());
    let p = TrainConfig::paper_scale();
    assert_eq!((p.batch_size, p.max_epochs, p.patience), (1024, 500, 30));
    assert!(p.validate().is_ok());
}

#[test]
fn history_csv_layout() {
    let h = TrainHistory {
        records: vec![
            EpochRecord { epoch: 0, train_loss: 2.0, val_loss: 1.5, val_accuracy: 0.25 },
            EpochRecord { epoch: 1, train_loss: 1.0, val_loss: 1.25, val_accuracy: 0.5 },
        ],
        best_epoch: Some(1),
        stopped_early: false,
    };
    assert_eq!(h.to_csv(), "epoch,train_loss,val_loss,val_acc\n0,2.000000,1.500000,0.250000\n1,1.000000,1.250000,0.500000\n");
}

// Evaluation ---------------------------------------------------------------

#[test]
fn accuracy_definition() {
    assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]), 1.0);
    assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 0, 1, 1]), 0.5);
}

#[test]
fn evaluate_matches_predictions() {
    let (tr, _) = small_data(13);
    let bundle = ModelBundle::new(tiny(ModelKind::Moe, 3), 14).unwrap();
    let ev = evaluate::<f64>(&bundle, &tr, 5).unwrap();
    let frames: Vec<_> = tr.examples.iter().map(|e| &e.frame).collect();
    let direct = bundle.predict::<f64>(&frames, 64).unwrap();
    assert_eq!(ev.predictions, direct.classes());
    assert_eq!(ev.gate.as_ref().unwrap().len(), tr.len());
    let labels: Vec<usize> = tr.examples.iter().map(|e| e.class_idx).collect();
    assert_eq!(ev.accuracy, accuracy(&ev.predictions, &labels));
}

fn balanced_8class(per_cell: usize) -> Dataset {
    generate_dataset(&spec(&ModulationScheme::ALL, &[-10.0, 0.0, 10.0], 128, per_cell, 15)).unwrap()
}

#[test]
fn fresh_models_are_at_chance() {
    let ds = balanced_8class(84);
    assert!(ds.len() >= 2000);
    for kind in ModelKind::ALL {
        let bundle = ModelBundle::new(Architecture::new(kind, 128, 8), 16).unwrap();
        let ev = evaluate::<f32>(&bundle, &ds, 512).unwrap();
        assert!((ev.accuracy - 0.125).abs() <= 0.04, "{kind}: {}", ev.accuracy);
    }
}

#[test]
fn initial_loss_is_near_log_k() {
    let ds = balanced_8class(8);
    for kind in ModelKind::ALL {
        let bundle = ModelBundle::new(Architecture::new(kind, 128, 8), 17).unwrap();
        let ev = evaluate::<f64>(&bundle, &ds, 256).unwrap();
        let ln_k = 8f64.ln();
        assert!((ev.loss - ln_k).abs() <= 0.15 * ln_k, "{kind}: {}", ev.loss);
    }
}

#[test]
fn small_subset_loss_collapses() {
    let ds = balanced_8class(4);
    let subset = ds.select(&(0..ds.len()).step_by(3).take(32).collect::<Vec<_>>(), crate::sigsynth::SplitTag::Train);
    let mut bundle = ModelBundle::new(Architecture::new(ModelKind::Hsrm, 128, 8), 18).unwrap();
    let initial = evaluate::<f32>(&bundle, &subset, 64).unwrap().loss;
    let cfg = TrainConfig { batch_size: 32, max_epochs: 100, patience: 100, seed: 19, model_kind: ModelKind::Hsrm, ..Default::default() };
    let h = train(&mut bundle, &subset, &subset, &cfg).unwrap();
    let last = h.records.last().unwrap().train_loss;
    assert!(last < 0.1 * initial, "initial {initial}, final {last}");
}

