//! Oracle suites run by `moe-amc selftest`.

use std::f64::consts::LN_2;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::models::{moe_mix, preprocess_batch, Architecture, ModelBundle, ModelError, ModelKind};
use crate::report::{accuracy_by_snr, average_accuracy};
use crate::rng;
use crate::sigsynth::{
    self, apply_awgn, generate_dataset, modulate, DatasetSpec, IqFrame, LabeledExample, ModulationScheme, SplitTag,
};
use crate::tensorcore::{
    grad_check, BatchNormOpts, GradCheckOpts, Graph, MhaWeights, NormMode, ParamStore, RunningStats, Tensor,
    TensorError, Var, CE_CLAMP, LAYER_NORM_EPS,
};
use crate::trainer::{adam_step, AdamConfig, EarlyStopping, Verdict};

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = Result<String, String>;

/// Runs every suite; a suite that errors counts as failed.
pub fn run_selftest() -> Vec<SuiteResult> {
    let suites: [(&'static str, fn() -> Outcome); 9] = [
        ("primitive gradients", primitive_gradients),
        ("moe-amc gradient", moe_gradient),
        ("analytic examples", analytic_examples),
        ("mixture endpoints", mixture_endpoints),
        ("probability conservation", probability_conservation),
        ("snr calibration", snr_calibration),
        ("early stopping", early_stopping),
        ("dataset format", dataset_format),
        ("snr metrics", snr_metrics),
    ];
    suites
        .into_iter()
        .map(|(name, f)| {
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            SuiteResult { name, passed, detail }
        })
        .collect()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn weigh(g: &mut Graph<f64>, y: Var, rng_seed: u64) -> Result<Var, TensorError> {
    let w = g.input(random(&mut rng::stream(rng_seed, 1), g.shape(y)))?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn to_tensor_error(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Malformed(other.to_string()),
    }
}

type OpFn = fn(&mut Graph<f64>, &ParamStore, &[Var]) -> Result<Var, TensorError>;

/// Each primitive in isolation, projected to a scalar by fixed random
/// weights.
fn primitive_gradients() -> Outcome {
    let cases: Vec<(&str, Vec<Vec<usize>>, OpFn)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], |g, _, v| g.matmul(v[0], v[1])),
        ("add_bias", vec![vec![3, 4], vec![4]], |g, _, v| g.add_bias(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, _, v| g.mul(v[0], v[1])),
        ("relu", vec![vec![4, 6]], |g, _, v| g.relu(v[0])),
        ("sigmoid", vec![vec![4, 6]], |g, _, v| g.sigmoid(v[0])),
        ("softmax", vec![vec![3, 5]], |g, _, v| g.softmax(v[0], 1)),
        ("max_pool1d", vec![vec![2, 3, 8]], |g, _, v| g.max_pool1d(v[0], 2, 2)),
        ("global_avg_pool", vec![vec![2, 3, 6]], |g, _, v| g.global_avg_pool(v[0])),
        ("conv1d", vec![vec![2, 3, 9], vec![4, 3, 3], vec![4]], |g, _, v| g.conv1d(v[0], v[1], v[2], 1, 1)),
        ("conv1d strided", vec![vec![2, 3, 9], vec![4, 3, 3], vec![4]], |g, _, v| g.conv1d(v[0], v[1], v[2], 2, 0)),
        ("batch_norm", vec![vec![4, 3, 5], vec![3], vec![3]], |g, s, v| {
            let stats = RunningStats { mean: s.id("rm").expect("buffer"), var: s.id("rv").expect("buffer") };
            g.batch_norm(v[0], v[1], v[2], stats, s, BatchNormOpts::default())
        }),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |g, _, v| g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)),
        ("attention", vec![vec![2, 3, 4], vec![2, 5, 4], vec![2, 5, 3]], |g, _, v| g.attention(v[0], v[1], v[2])),
        (
            "multi_head_attention",
            vec![vec![2, 4, 8], vec![8, 8], vec![8, 8], vec![8, 8], vec![8, 8], vec![8], vec![8], vec![8]],
            |g, _, v| {
                let w = MhaWeights { wq: v[1], wk: v[2], wv: v[3], wo: v[4], biases: Some([v[5], v[6], v[7]]) };
                g.multi_head_attention(v[0], &w, 2)
            },
        ),
        ("cross_entropy", vec![vec![4, 5]], |g, _, v| {
            let p = g.softmax(v[0], 1)?;
            let loss = g.cross_entropy(p, &[0, 4, 2, 2], CE_CLAMP)?;
            // Already scalar; the projection below multiplies by a constant.
            Ok(loss)
        }),
        ("moe_mix", vec![vec![3, 4], vec![3, 4], vec![3]], |g, _, v| {
            let yh = g.softmax(v[0], 1)?;
            let yl = g.softmax(v[1], 1)?;
            let gate = g.sigmoid(v[2])?;
            moe_mix(g, yh, yl, gate)
        }),
    ];
    let n_cases = cases.len();
    let mut worst = 0.0f64;
    for (k, (name, shapes, op)) in cases.into_iter().enumerate() {
        let mut rng = rng::stream(rng::role::GRADCHECK, k as u64);
        let mut store = ParamStore::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(j, sh)| store.add(&format!("p{j}"), random(&mut rng, sh)))
            .collect::<Result<_, _>>()
            .map_err(s)?;
        store.add_buffer("rm", Tensor::zeros([3])).map_err(s)?;
        store.add_buffer("rv", Tensor::full([3], 1.0)).map_err(s)?;
        let report = grad_check(
            &mut store,
            |g, st| {
                let vars: Vec<Var> = ids.iter().map(|&id| g.param(st, id)).collect::<Result<_, _>>()?;
                let y = op(g, st, &vars)?;
                weigh(g, y, k as u64)
            },
            GradCheckOpts { max_coords: 4096, ..Default::default() },
        )
        .map_err(|e| format!("{name}: {e}"))?;
        ensure(report.max_rel_error < 1e-6 && report.skipped == 0, || format!("{name}: {report:?}"))?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(format!("max relative error {worst:.2e} over {n_cases} primitives"))
}

/// Four default-spec frames with distinct classes and SNRs.
fn sample_batch(n: usize, seed: u64) -> Result<(Vec<LabeledExample>, DatasetSpec), String> {
    let spec = DatasetSpec { seed, ..DatasetSpec::default() };
    let stride = spec.n_examples() / n;
    let ex = (0..n).map(|k| sigsynth::generate_example(&spec, k * stride + k)).collect::<Result<Vec<_>, _>>();
    Ok((ex.map_err(s)?, spec))
}

/// Relative error of the full mixture loss against central differences on
/// a 4-example batch, away from the symmetric initial point.
pub(crate) fn moe_grad_error(seed: u64) -> Result<crate::tensorcore::GradCheckReport, String> {
    let (examples, spec) = sample_batch(4, seed)?;
    let arch = Architecture::new(ModelKind::Moe, spec.frame_len, spec.n_classes());
    let mut bundle = ModelBundle::new(arch, seed).map_err(s)?;
    bundle.desymmetrize(seed);
    let x: Tensor<f64> = preprocess_batch(examples.iter().map(|e| &e.frame), spec.frame_len).map_err(s)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.class_idx).collect();
    let shell = bundle.clone();
    grad_check(
        &mut bundle.store,
        |g, st| {
            let xv = g.input(x.clone())?;
            let out = shell.forward_with(g, st, xv, NormMode::Eval).map_err(to_tensor_error)?;
            g.cross_entropy(out.probs, &labels, CE_CLAMP)
        },
        GradCheckOpts { seed, ..Default::default() },
    )
    .map_err(s)
}

fn moe_gradient() -> Outcome {
    let r = moe_grad_error(1)?;
    ensure(r.max_rel_error < 1e-4 && r.skipped == 0, || format!("{r:?}"))?;
    Ok(format!("max relative error {:.2e} over {} coordinates", r.max_rel_error, r.checked))
}

fn analytic_examples() -> Outcome {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64([1, 2], &[0.0, 3f64.ln()]).map_err(s)?).map_err(s)?;
    let p = g.softmax(x, 1).map_err(s)?;
    let d = g.value(p).data();
    ensure((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12, || format!("softmax([0, ln 3]) = {d:?}"))?;

    let u = g.input(Tensor::full([2, 8], 0.125)).map_err(s)?;
    let ce = g.cross_entropy(u, &[1, 6], CE_CLAMP).map_err(s)?;
    let ce = g.value(ce).item();
    ensure((ce - 3.0 * LN_2).abs() < 1e-12, || format!("uniform 8-class CE = {ce}"))?;

    let q = g.input(Tensor::from_f64([1, 1, 2], &[0.3, -1.2]).map_err(s)?).map_err(s)?;
    let k = g.input(Tensor::from_f64([1, 2, 2], &[0.5, 0.5, 0.5, 0.5]).map_err(s)?).map_err(s)?;
    let v = g.input(Tensor::from_f64([1, 2, 2], &[1.0, 2.0, 3.0, 6.0]).map_err(s)?).map_err(s)?;
    let a = g.attention(q, k, v).map_err(s)?;
    let a = g.value(a).data();
    ensure((a[0] - 2.0).abs() < 1e-12 && (a[1] - 4.0).abs() < 1e-12, || format!("identical keys: {a:?}"))?;

    let cfg = AdamConfig::default();
    let (mut p, mut m, mut v) = ([1.0, -2.0], [0.0; 2], [0.0; 2]);
    adam_step(&mut p, &[0.5, -3.0], &mut m, &mut v, 1, &cfg).map_err(s)?;
    let steps = [1.0 - p[0], -2.0 - p[1]];
    ensure(steps.iter().all(|d| (d.abs() - cfg.lr).abs() < 1e-10), || format!("first Adam steps {steps:?}"))?;
    Ok("softmax, cross-entropy, attention and Adam match closed forms".into())
}

fn bias_gate(bundle: &mut ModelBundle, bias: f64) -> Result<(), String> {
    let id = bundle.store.id("gate.mlp.2.b").ok_or("gate output bias missing")?;
    bundle.store.value_mut(id).data_mut().fill(bias);
    Ok(())
}

fn random_frames(n: usize, len: usize, seed: u64) -> Vec<IqFrame> {
    let mut r = rng::stream(seed, 0);
    (0..n)
        .map(|_| {
            let mut ch = || (0..len).map(|_| r.random_range(-1.0f32..1.0)).collect();
            IqFrame::new(ch(), ch()).expect("equal lengths")
        })
        .collect()
}

/// Returns `(y_final, y_high, y_low)` in eval mode.
fn mixture_outputs(bundle: &ModelBundle, frames: &[IqFrame]) -> Result<[Tensor<f64>; 3], String> {
    let mut g = Graph::<f64>::new();
    let x = preprocess_batch(frames, bundle.input_len()).map_err(s)?;
    let xv = g.input(x).map_err(s)?;
    let out = bundle.forward(&mut g, xv, NormMode::Eval).map_err(s)?;
    let (yh, yl) = out.experts.ok_or("not a mixture")?;
    Ok([g.value(out.probs).clone(), g.value(yh).clone(), g.value(yl).clone()])
}

fn default_moe(seed: u64) -> Result<ModelBundle, String> {
    let mut b = ModelBundle::new(Architecture::new(ModelKind::Moe, 128, 8), seed).map_err(s)?;
    b.desymmetrize(seed);
    Ok(b)
}

fn mixture_endpoints() -> Outcome {
    let mut bundle = default_moe(2)?;
    let frames = random_frames(32, 128, 3);
    for (bias, high) in [(20.0, true), (-20.0, false)] {
        bias_gate(&mut bundle, bias)?;
        let [y, yh, yl] = mixture_outputs(&bundle, &frames)?;
        let want = if high { yh } else { yl };
        let err = y.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(err < 1e-7, || format!("gate bias {bias}: deviation {err:.2e}"))?;
    }
    Ok("gate bias ±20 selects one expert within 1e-7".into())
}

fn probability_conservation() -> Outcome {
    let bundle = default_moe(4)?;
    let frames = random_frames(1000, 128, 5);
    let mut worst = 0.0f64;
    for chunk in frames.chunks(100) {
        let [y, yh, yl] = mixture_outputs(&bundle, chunk)?;
        for t in [&y, &yh, &yl] {
            for row in t.data().chunks(8) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        for ((f, a), b) in y.data().iter().zip(yh.data()).zip(yl.data()) {
            ensure(*f >= a.min(*b) - 1e-15 && *f <= a.max(*b) + 1e-15, || format!("{f} outside [{a}, {b}]"))?;
        }
    }
    ensure(worst < 1e-5, || format!("row sum deviation {worst:.2e}"))?;
    Ok(format!("1000 inputs, max row-sum deviation {worst:.1e}"))
}

/// Measured SNR per (scheme, SNR) cell of the default grid from the known
/// clean signal and the noise actually added.
pub(crate) fn snr_errors(min_samples: usize, seed: u64) -> Result<Vec<(ModulationScheme, f64, f64)>, String> {
    let spec = DatasetSpec::default();
    let mut out = Vec::new();
    for (c, &scheme) in spec.schemes.iter().enumerate() {
        for (k, &snr) in spec.snr_grid_db.iter().enumerate() {
            let mut r = rng::stream(seed, (c * 64 + k) as u64);
            let (mut ps, mut pn, mut n) = (0.0, 0.0, 0usize);
            while n < min_samples {
                let bits: Vec<u8> = (0..spec.frame_len / spec.samples_per_symbol * scheme.bits_per_symbol())
                    .map(|_| r.random_range(0..2u8))
                    .collect();
                let clean = modulate(&bits, scheme, spec.samples_per_symbol).map_err(s)?;
                if sigsynth::mean_power(&clean) == 0.0 {
                    continue;
                }
                let noisy = apply_awgn(&clean, snr, &mut r).map_err(s)?;
                for j in 0..clean.len() {
                    let (ci, cq) = (clean.i()[j] as f64, clean.q()[j] as f64);
                    ps += ci * ci + cq * cq;
                    let (ni, nq) = (noisy.i()[j] as f64 - ci, noisy.q()[j] as f64 - cq);
                    pn += ni * ni + nq * nq;
                }
                n += clean.len();
            }
            out.push((scheme, snr, 10.0 * (ps / pn).log10() - snr));
        }
    }
    Ok(out)
}

fn snr_calibration() -> Outcome {
    let errs = snr_errors(100_000, 6)?;
    let (scheme, snr, worst) =
        errs.iter().cloned().max_by(|a, b| a.2.abs().total_cmp(&b.2.abs())).ok_or("empty grid")?;
    ensure(worst.abs() <= 0.3, || format!("{scheme} at {snr} dB off by {worst:.3} dB"))?;
    Ok(format!("{} cells, worst offset {:.3} dB ({scheme} at {snr} dB)", errs.len(), worst.abs()))
}

/// Feeds `losses` and returns the epoch of the stop verdict and the best epoch.
fn stop_point(patience: usize, losses: &[f64]) -> (Option<usize>, Option<usize>) {
    let mut es = EarlyStopping::new(patience);
    for (e, &l) in losses.iter().enumerate() {
        if es.observe(e, l) == Verdict::Stop {
            return (Some(e), es.best_epoch());
        }
    }
    (None, es.best_epoch())
}

fn early_stopping() -> Outcome {
    let flat_after = |n: usize, total: usize| -> Vec<f64> {
        (0..total).map(|e| if e < n { 10.0 - e as f64 } else { 10.0 - n as f64 + 1.0 }).collect()
    };
    let cases = [
        (1, vec![3.0, 2.0, 2.5], (Some(2), Some(1))),
        (2, vec![3.0, 2.0, 2.0, 2.0], (Some(3), Some(1))),
        (2, vec![3.0, 2.0, 2.5, 1.0, 1.5, 1.2], (Some(5), Some(3))),
        (30, flat_after(5, 100), (Some(34), Some(4))),
        (30, flat_after(5, 34), (None, Some(4))),
    ];
    for (p, losses, want) in cases {
        let got = stop_point(p, &losses);
        ensure(got == want, || format!("patience {p}: got {got:?}, want {want:?}"))?;
    }
    Ok("patience 1, 2 and 30 stop and restore where expected".into())
}

fn dataset_format() -> Outcome {
    let spec = DatasetSpec {
        schemes: vec![ModulationScheme::Bpsk, ModulationScheme::Qam16],
        snr_grid_db: vec![-4.0, 8.0],
        frame_len: 32,
        frames_per_cell: 3,
        seed: 9,
        ..DatasetSpec::default()
    };
    let ds = generate_dataset(&spec).map_err(s)?;
    let mut bytes = Vec::new();
    sigsynth::write_dataset(&ds, &mut bytes).map_err(s)?;
    let back = sigsynth::read_dataset(bytes.as_slice()).map_err(s)?;
    ensure(back == ds, || "round trip changed the dataset".into())?;
    let mut again = Vec::new();
    sigsynth::write_dataset(&generate_dataset(&spec).map_err(s)?, &mut again).map_err(s)?;
    ensure(again == bytes, || "regeneration is not byte-identical".into())?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    ensure(
        matches!(sigsynth::read_dataset(bytes.as_slice()), Err(sigsynth::SigError::Checksum { .. })),
        || "corrupted payload not detected".into(),
    )?;
    Ok(format!("{} examples round-trip; corruption detected", ds.len()))
}

fn snr_metrics() -> Outcome {
    let rows = [(0, 0.0), (1, 0.0), (2, 0.0), (2, 10.0), (1, 10.0), (0, 10.0)];
    let ds = sigsynth::Dataset {
        examples: rows
            .iter()
            .map(|&(class_idx, snr_db)| LabeledExample { frame: IqFrame::zeros(8), class_idx, snr_db })
            .collect(),
        spec: DatasetSpec { schemes: ModulationScheme::ALL[..3].to_vec(), ..DatasetSpec::default() },
        split_tag: SplitTag::Test,
    };
    let m = accuracy_by_snr(&[0, 2, 2, 1, 1, 1], &ds, None).map_err(s)?;
    let got: Vec<(u64, u64)> = m.per_snr.iter().map(|b| (b.correct, b.total)).collect();
    ensure(got == [(2, 3), (1, 3)], || format!("bins {got:?}"))?;
    let avg = average_accuracy(&m).map_err(s)?;
    ensure((avg - 0.5).abs() < 1e-15, || format!("average {avg}"))?;
    Ok("hand-counted bins and average reproduced".into())
}
