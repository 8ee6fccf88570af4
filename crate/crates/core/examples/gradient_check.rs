//! Checks backpropagated gradients of the mixture-of-experts loss against
//! central finite differences.
//!
//! cargo run --example gradient_check

use moe_amc::models::{preprocess_batch, Architecture, ModelBundle, ModelError, ModelKind};
use moe_amc::sigsynth::{self, DatasetSpec};
use moe_amc::tensorcore::{grad_check, GradCheckOpts, NormMode, TensorError, CE_CLAMP};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = DatasetSpec { seed: 3, ..DatasetSpec::default() };
    let examples = [10, 4000, 9000, 15000].map(|n| sigsynth::generate_example(&spec, n)).into_iter().collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<usize> = examples.iter().map(|e| e.class_idx).collect();
    let x = preprocess_batch::<f64>(examples.iter().map(|e| &e.frame), spec.frame_len)?;

    let mut bundle = ModelBundle::new(Architecture::new(ModelKind::Moe, spec.frame_len, spec.n_classes()), 1)?;
    // Fresh expert heads output zeros, a point where most gradients vanish.
    bundle.desymmetrize(1);
    println!("{} trainable scalars", bundle.store.n_trainable());

    let shell = bundle.clone();
    let report = grad_check(
        &mut bundle.store,
        |g, store| {
            let xv = g.input(x.clone())?;
            let out = shell.forward_with(g, store, xv, NormMode::Eval).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => TensorError::Malformed(other.to_string()),
            })?;
            g.cross_entropy(out.probs, &labels, CE_CLAMP)
        },
        GradCheckOpts { max_coords: 300, ..Default::default() },
    )?;
    println!(
        "checked {} coordinates ({} needed a smaller step near a ReLU kink, {} skipped)",
        report.checked, report.refined, report.skipped
    );
    println!("max relative error {:.2e} at {:?}", report.max_rel_error, report.worst);
    Ok(())
}
