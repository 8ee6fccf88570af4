use std::collections::BTreeSet;

use rand::seq::index::sample;

use super::{Graph, ParamId, ParamStore, TensorError, Var};
use crate::rng;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOpts {
    /// Central-difference step.
    pub step: f64,
    /// Above this many trainable scalars, a random subset of this size is
    /// checked instead of every coordinate.
    pub max_coords: usize,
    /// When subsampling, every trainable tensor contributes at least this
    /// many coordinates (or all of its own, if fewer).
    pub min_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        Self { step: 1e-5, max_coords: 256, min_per_tensor: 1, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose difference was retaken with a smaller step
    /// because the first one crossed a kink.
    pub refined: usize,
    /// Coordinates left out because every step crossed a kink.
    pub skipped: usize,
}

/// Successive step reductions tried when a difference crosses a kink.
const REFINEMENTS: [f64; 3] = [1.0, 0.1, 0.01];

/// Compares backward gradients of a scalar function of the trainable
/// parameters in `store` against central finite differences.
///
/// The relative error of a coordinate is
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// A central difference is only an oracle where `f` is smooth on
/// `[θ − h, θ + h]`. Graphs are built with kink tracking; when either
/// perturbed evaluation takes a different ReLU or max-pool branch than the
/// unperturbed one, the step is shrunk tenfold, at most twice.
pub fn grad_check<F>(store: &mut ParamStore, mut f: F, opts: GradCheckOpts) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Graph<f64>, &ParamStore) -> Result<Var, TensorError>,
{
    store.zero_grad();
    let base = {
        let mut g = Graph::<f64>::with_kink_tracking();
        let out = f(&mut g, store)?;
        g.backward(out, store)?;
        g.kink_signature()
    };

    let mut eval = |store: &ParamStore| -> Result<(f64, Option<u64>), TensorError> {
        let mut g = Graph::<f64>::with_kink_tracking();
        let out = f(&mut g, store)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok((v.item(), g.kink_signature()))
    };

    let coords: Vec<(ParamId, usize)> = store
        .trainable_ids()
        .into_iter()
        .flat_map(|id| (0..store.value(id).numel()).map(move |k| (id, k)))
        .collect();
    let chosen: Vec<(ParamId, usize)> = if coords.len() <= opts.max_coords {
        coords
    } else {
        let mut r = rng::stream(opts.seed, rng::role::GRADCHECK);
        let mut picked = BTreeSet::new();
        let mut start = 0;
        for id in store.trainable_ids() {
            let n = store.value(id).numel();
            picked.extend(sample(&mut r, n, opts.min_per_tensor.min(n)).into_iter().map(|k| start + k));
            start += n;
        }
        let rest = opts.max_coords.saturating_sub(picked.len());
        let free: Vec<usize> = (0..coords.len()).filter(|k| !picked.contains(k)).collect();
        picked.extend(sample(&mut r, free.len(), rest.min(free.len())).into_iter().map(|k| free[k]));
        picked.into_iter().map(|k| coords[k]).collect()
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, refined: 0, skipped: 0 };
    for (id, k) in chosen {
        let analytic = store.grad(id).data()[k];
        let orig = store.value(id).data()[k];
        let mut numeric = None;
        for (attempt, scale) in REFINEMENTS.iter().enumerate() {
            let h = opts.step * scale;
            store.value_mut(id).data_mut()[k] = orig + h;
            let plus = eval(store);
            store.value_mut(id).data_mut()[k] = orig - h;
            let minus = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            let ((fp, sp), (fm, sm)) = (plus?, minus?);
            if sp == base && sm == base {
                report.refined += (attempt > 0) as usize;
                numeric = Some((fp - fm) / (2.0 * h));
                break;
            }
        }
        let Some(numeric) = numeric else {
            report.skipped += 1;
            continue;
        };
        report.checked += 1;
        let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((store.get(id).name.clone(), k));
        }
    }
    Ok(report)
}
