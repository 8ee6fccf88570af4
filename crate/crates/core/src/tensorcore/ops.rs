use super::graph::{axis_split, permute_data, MatMulPlan, NormMode, Op, RunningUpdate, Var};
use super::params::{ParamId, ParamStore};
use super::real::{gemm, lane_sum, lane_sum_by, MatView};
use super::{Graph, Real, Tensor, TensorError};

/// Output positions `lo..hi` whose tap `t` reads an in-bounds input
/// sample `l·stride + t − pad`.
pub(super) fn tap_range(t: usize, stride: usize, pad: usize, len: usize, lout: usize) -> (usize, usize) {
    let lo = if pad > t { (pad - t).div_ceil(stride) } else { 0 };
    let hi = if len + pad > t { ((len + pad - t - 1) / stride + 1).min(lout) } else { 0 };
    (lo, hi.max(lo))
}

fn shape_err(msg: String) -> TensorError {
    TensorError::Shape(msg)
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct RunningStats {
    pub mean: ParamId,
    pub var: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormOpts {
    pub mode: NormMode,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormOpts {
    fn default() -> Self {
        Self { mode: NormMode::Train, momentum: 0.1, eps: 1e-5 }
    }
}

/// Projections of one multi-head self-attention layer. Each matrix is
/// `[d_model, d_model]`; head `h` uses columns `h·d_head .. (h+1)·d_head`
/// of the query, key and value projections.
#[derive(Clone, Copy, Debug)]
pub struct MhaWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    /// Optional `[d_model]` biases for the Q, V and output projections.
    /// There is no key bias: it shifts a whole score row, which softmax cancels.
    pub biases: Option<[Var; 3]>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const CE_CLAMP: f64 = 1e-12;

impl<T: Real> Graph<T> {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved")
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        Tensor::new(self.shape(x).to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, TensorError> {
        let (s, c) = (T::cst(scale), T::cst(shift));
        let out = self.map(x, |v| s * v + c);
        self.push(out, Op::Affine { x, scale: s }, "affine")
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let d = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [d] {
            return Err(shape_err(format!("add_bias: bias {:?} for input {:?}", self.shape(bias), self.shape(x))));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v = *v + bb;
            }
        }
        self.push(out, Op::AddBias { x, bias }, "add_bias")
    }

    /// Multiplies every element of row `b` of `x` by `s[b]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x);
        if xs.is_empty() || self.shape(s) != [xs[0]] {
            return Err(shape_err(format!("scale_rows: scales {:?} for input {:?}", self.shape(s), xs)));
        }
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        let row = out.numel() / sv.len().max(1);
        if row > 0 {
            for (chunk, &k) in out.data_mut().chunks_exact_mut(row).zip(&sv) {
                chunk.iter_mut().for_each(|v| *v = *v * k);
            }
        }
        self.push(out, Op::ScaleRows { x, s }, "scale_rows")
    }

    /// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]` with
    /// broadcasting over the leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(shape_err(format!("matmul needs rank >= 2, got {ash:?} and {bsh:?}")));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != k2 {
            return Err(shape_err(format!("matmul inner dims: {ash:?} × {bsh:?}")));
        }
        let (abatch, bbatch) = (&ash[..ash.len() - 2], &bsh[..bsh.len() - 2]);

        let (plan, out_shape) = if bbatch.is_empty() {
            // A plain weight matrix: fold every leading axis of `a` into rows.
            let rows = abatch.iter().product::<usize>() * m;
            let mut s = abatch.to_vec();
            s.extend([m, n]);
            (MatMulPlan { m: rows, k, n, slices: vec![(0, 0, 0)] }, s)
        } else {
            let rank = abatch.len().max(bbatch.len());
            let pad = |s: &[usize]| {
                let mut v = vec![1; rank - s.len()];
                v.extend_from_slice(s);
                v
            };
            let (pa, pb) = (pad(abatch), pad(bbatch));
            let mut batch = Vec::with_capacity(rank);
            for d in 0..rank {
                match (pa[d], pb[d]) {
                    (x, y) if x == y => batch.push(x),
                    (1, y) => batch.push(y),
                    (x, 1) => batch.push(x),
                    _ => return Err(shape_err(format!("matmul batch dims not broadcastable: {ash:?} × {bsh:?}"))),
                }
            }
            let count: usize = batch.iter().product();
            let mut slices = Vec::with_capacity(count);
            let mut idx = vec![0usize; rank];
            for s in 0..count {
                let (mut ao, mut bo) = (0usize, 0usize);
                for d in 0..rank {
                    ao = ao * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
                    bo = bo * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
                }
                slices.push((ao * m * k, bo * k * n, s * m * n));
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    if idx[d] < batch[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            let mut s = batch;
            s.extend([m, n]);
            (MatMulPlan { m, k, n, slices }, s)
        };

        let mut out = vec![T::zero(); out_shape.iter().product()];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for &(ao, bo, co) in &plan.slices {
                gemm(
                    &av[ao..],
                    MatView::row_major(plan.m, k),
                    &bv[bo..],
                    MatView::row_major(k, n),
                    T::zero(),
                    &mut out[co..],
                    MatView::row_major(plan.m, n),
                );
            }
        }
        let out = Tensor::new(out_shape, out)?;
        self.push(out, Op::MatMul { a, b, plan }, "matmul")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err(format!("permute: {axes:?} is not a permutation of {} axes", shape.len())));
        }
        let (s, data) = permute_data(self.value(x).data(), &shape, axes);
        self.push(Tensor::new(s, data)?, Op::Permute { x, axes: axes.to_vec() }, "permute")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_err("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.map(x, |v| v.max(T::zero()));
        if self.kinks.is_some() {
            let signs: Vec<u64> = self.value(x).data().chunks(64).map(|c| c.iter().fold(0u64, |m, &v| m << 1 | (v > T::zero()) as u64)).collect();
            self.record_branches(signs.into_iter());
        }
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.map(x, |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push(out, Op::Sigmoid(x), "sigmoid")
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { axis, rank: shape.len() });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let max = (0..len).map(|l| xv[at(l)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for l in 0..len {
                    let e = (xv[at(l)] - max).exp();
                    out[at(l)] = e;
                    total = total + e;
                }
                for l in 0..len {
                    out[at(l)] = out[at(l)] / total;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::Softmax { x, axis }, "softmax")
    }

    /// Max pooling over the last axis. Ties resolve to the first maximum.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| shape_err("max_pool1d on a scalar".into()))?;
        if kernel == 0 || stride == 0 || len < kernel {
            return Err(TensorError::Geometry(format!("max_pool1d: length {len}, kernel {kernel}, stride {stride}")));
        }
        let lout = (len - kernel) / stride + 1;
        let rows = self.value(x).numel() / len;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * lout);
        let mut argmax = Vec::with_capacity(rows * lout);
        for r in 0..rows {
            for l in 0..lout {
                let start = r * len + l * stride;
                let mut best = start;
                for j in start + 1..start + kernel {
                    if xv[j] > xv[best] {
                        best = j;
                    }
                }
                out.push(xv[best]);
                argmax.push(best);
            }
        }
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = lout;
        self.record_branches(argmax.iter().map(|&a| a as u64));
        self.push(Tensor::new(oshape, out)?, Op::MaxPool { x, argmax }, "max_pool1d")
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { axis, rank: shape.len() });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        if len == 0 {
            return Err(TensorError::Geometry("mean over an empty axis".into()));
        }
        let xv = self.value(x).data();
        let scale = T::one() / T::cst(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + xv[(o * len + l) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * scale);
        let mut oshape = shape;
        oshape.remove(axis);
        self.push(Tensor::new(oshape, out)?, Op::Mean { x, axis }, "mean")
    }

    /// Global average pooling over the time axis of `[B, T, d]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        if self.shape(x).len() != 3 {
            return Err(shape_err(format!("global_avg_pool expects [B, T, d], got {:?}", self.shape(x))));
        }
        self.mean_axis(x, 1)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), "sum")
    }

    /// 1-D cross-correlation of `[B, Cin, L]` with `[Cout, Cin, k]` plus a
    /// per-channel bias.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || self.shape(b) != [ws[0]] {
            return Err(shape_err(format!(
                "conv1d: input {xs:?}, weight {ws:?}, bias {:?}",
                self.shape(b)
            )));
        }
        let (bsz, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, kw) = (ws[0], ws[2]);
        if stride == 0 || kw == 0 || len + 2 * pad < kw {
            return Err(TensorError::Geometry(format!("conv1d: length {len}, kernel {kw}, pad {pad}, stride {stride}")));
        }
        let lout = (len + 2 * pad - kw) / stride + 1;
        let (ck, bl) = (cin * kw, bsz * lout);

        let xv = self.value(x).data();
        let mut cols = vec![T::zero(); ck * bl];
        for c in 0..cin {
            for t in 0..kw {
                let (lo, hi) = tap_range(t, stride, pad, len, lout);
                let row = &mut cols[(c * kw + t) * bl..][..bl];
                for bi in 0..bsz {
                    let src = &xv[(bi * cin + c) * len..][..len];
                    let dst = &mut row[bi * lout..][..lout];
                    if stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[lo + t - pad..hi + t - pad]);
                    } else {
                        for l in lo..hi {
                            dst[l] = src[l * stride + t - pad];
                        }
                    }
                }
            }
        }
        let mut yt = vec![T::zero(); cout * bl];
        gemm(self.value(w).data(), MatView::row_major(cout, ck), &cols, MatView::row_major(ck, bl), T::zero(), &mut yt, MatView::row_major(cout, bl));
        let bias = self.value(b).data();
        let mut out = vec![T::zero(); bsz * cout * lout];
        for o in 0..cout {
            for bi in 0..bsz {
                let src = &yt[o * bl + bi * lout..][..lout];
                let dst = &mut out[(bi * cout + o) * lout..][..lout];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[o];
                }
            }
        }
        let out = Tensor::new(vec![bsz, cout, lout], out)?;
        self.push(out, Op::Conv1d { x, w, b, stride, pad, cols }, "conv1d")
    }

    /// Batch normalization of `[B, C, ..]` per channel over batch and
    /// trailing axes. Train mode normalizes with the biased batch variance
    /// and queues a running-statistics update (unbiased variance) that
    /// [`Graph::commit_running_stats`] applies.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: RunningStats,
        store: &ParamStore,
        opts: BatchNormOpts,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err(format!("batch_norm expects [B, C, ..], got {shape:?}")));
        }
        let (bsz, c) = (shape[0], shape[1]);
        let l: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(format!("batch_norm affine params for {c} channels")));
        }
        let n = bsz * l;
        let train = opts.mode == NormMode::Train;
        if train && n < 2 {
            return Err(TensorError::Geometry(format!("batch_norm in train mode needs B·L >= 2, got {n}")));
        }
        let xv = self.value(x).data();
        let eps = T::cst(opts.eps);
        let (mut mean, mut var) = (vec![T::zero(); c], vec![T::zero(); c]);
        let mut pending = None;
        if train {
            let nt = T::cst(n as f64);
            for ch in 0..c {
                let slices = || (0..bsz).map(|bi| &xv[(bi * c + ch) * l..][..l]);
                let m = slices().map(lane_sum).fold(T::zero(), |a, s| a + s) / nt;
                let v = slices().map(|s| lane_sum_by(s, |x| (x - m) * (x - m))).fold(T::zero(), |a, s| a + s) / nt;
                mean[ch] = m;
                var[ch] = v;
            }
            let unbiased = n as f64 / (n as f64 - 1.0);
            pending = Some(RunningUpdate {
                mean: stats.mean,
                var: stats.var,
                batch_mean: mean.iter().map(|v| v.as_f64()).collect(),
                batch_var: var.iter().map(|v| v.as_f64() * unbiased).collect(),
                momentum: opts.momentum,
            });
        } else {
            for ch in 0..c {
                mean[ch] = T::cst(store.value(stats.mean).data()[ch]);
                var[ch] = T::cst(store.value(stats.var).data()[ch]);
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..bsz {
            for ch in 0..c {
                let off = (bi * c + ch) * l;
                for k in off..off + l {
                    let h = (xv[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    out[k] = g[ch] * h + bt[ch];
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.running.extend(pending);
        self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, "batch_norm")
    }

    /// Normalizes each vector along the last axis, then applies `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| shape_err("layer_norm on a scalar".into()))?;
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(format!("layer_norm: input {shape:?}, gamma {:?}", self.shape(gamma))));
        }
        let (xv, g, bt) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let dn = T::cst(d as f64);
        let eps = T::cst(eps);
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.chunks_exact(d).enumerate() {
            let m = row.iter().copied().sum::<T>() / dn;
            let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / dn;
            let is = T::one() / (v + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - m) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bt[j];
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, "layer_norm")
    }

    /// Mean over the batch of `-ln(max(p[label], clamp))` for probability
    /// rows `p: [B, K]`.
    pub fn cross_entropy(&mut self, p: Var, labels: &[usize], clamp: f64) -> Result<Var, TensorError> {
        let shape = self.shape(p).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
            return Err(shape_err(format!("cross_entropy: probs {shape:?} with {} labels", labels.len())));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Label { label: bad, classes: k });
        }
        let pv = self.value(p).data();
        for row in pv.chunks_exact(k) {
            let s: T = row.iter().copied().sum();
            if (s.as_f64() - 1.0).abs() > 1e-4 {
                return Err(TensorError::NotProbabilities(s.as_f64()));
            }
        }
        let c = T::cst(clamp);
        let total: T = labels.iter().enumerate().map(|(r, &l)| -pv[r * k + l].max(c).ln()).sum();
        let loss = total / T::cst(labels.len() as f64);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { p, labels: labels.to_vec(), clamp: c }, "cross_entropy")
    }

    /// `softmax(Q·Kᵀ / √d_k) · V` over the last two axes.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var, TensorError> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let r = qs.len();
        if r < 2 || ks.len() != r || vs.len() != r || qs[r - 1] != ks[r - 1] || ks[r - 2] != vs[r - 2] {
            return Err(shape_err(format!("attention: Q {qs:?}, K {ks:?}, V {vs:?}")));
        }
        let dk = qs[r - 1] as f64;
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.affine(scores, 1.0 / dk.sqrt(), 0.0)?;
        let weights = self.softmax(scaled, r - 1)?;
        self.matmul(weights, v)
    }

    fn project(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Self-attention over `[B, T, d_model]` split into `heads` heads.
    pub fn multi_head_attention(&mut self, x: Var, w: &MhaWeights, heads: usize) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err(format!("multi_head_attention expects [B, T, d], got {xs:?}")));
        }
        let (b, t, d) = (xs[0], xs[1], xs[2]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Geometry(format!("d_model {d} not divisible by {heads} heads")));
        }
        for m in [w.wq, w.wk, w.wv, w.wo] {
            if self.shape(m) != [d, d] {
                return Err(shape_err(format!("projection {:?} for d_model {d}", self.shape(m))));
            }
        }
        let dh = d / heads;
        let bias = |k: usize| w.biases.map(|bs| bs[k]);
        let split = |g: &mut Self, m: Var, bi: Option<Var>| -> Result<Var, TensorError> {
            let p = g.project(x, m, bi)?;
            let p = g.reshape(p, &[b, t, heads, dh])?;
            g.permute(p, &[0, 2, 1, 3])
        };
        let q = split(self, w.wq, bias(0))?;
        let k = split(self, w.wk, None)?;
        let v = split(self, w.wv, bias(1))?;
        let heads_out = self.attention(q, k, v)?;
        let merged = self.permute(heads_out, &[0, 2, 1, 3])?;
        let merged = self.reshape(merged, &[b, t, d])?;
        self.project(merged, w.wo, bias(2))
    }
}
