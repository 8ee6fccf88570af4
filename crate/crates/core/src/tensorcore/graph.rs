//! Tape-based reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output and whatever context
//! its backward rule needs. Nodes are created in topological order, so
//! backward is a single reverse sweep over the tape.

use super::params::{ParamId, ParamStore};
use super::ops::tap_range;
use super::real::{gemm, lane_dot, lane_sum, MatView};
use super::{Real, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

pub(super) struct MatMulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Per output slice: element offsets into `a`, `b` and the output.
    pub slices: Vec<(usize, usize, usize)>,
}

pub(super) enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    AddBias { x: Var, bias: Var },
    ScaleRows { x: Var, s: Var },
    MatMul { a: Var, b: Var, plan: MatMulPlan },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    Conv1d { x: Var, w: Var, b: Var, stride: usize, pad: usize, cols: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    CrossEntropy { p: Var, labels: Vec<usize>, clamp: T },
}

pub(super) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// Batch statistics waiting to be folded into running statistics.
pub(super) struct RunningUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

/// One forward pass worth of recorded computation.
pub struct Graph<T: Real = f64> {
    pub(super) nodes: Vec<Node<T>>,
    pub(super) running: Vec<RunningUpdate>,
    pub(super) kinks: Option<u64>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, len, inner)` sizes around `axis`.
pub(super) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major permutation of `data` with logical `shape`.
pub(super) fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out_shape, out);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    loop {
        out.push(data[off]);
        let mut d = rank;
        loop {
            if d == 0 {
                return (out_shape, out);
            }
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), running: Vec::new(), kinks: None }
    }

    /// A graph that fingerprints the branch taken by every piecewise op
    /// (ReLU sign, max-pool winner). Two evaluations with equal
    /// fingerprints lie on the same smooth piece of the function.
    pub fn with_kink_tracking() -> Self {
        Self { kinks: Some(0xcbf2_9ce4_8422_2325), ..Self::new() }
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    pub(super) fn record_branches(&mut self, branches: impl Iterator<Item = u64>) {
        if let Some(h) = self.kinks.as_mut() {
            for b in branches {
                *h = (*h ^ b).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(super) fn push(&mut self, value: Tensor<T>, op: Op<T>, op_name: &'static str) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var, TensorError> {
        self.push(value, Op::Leaf, "input")
    }

    /// Leaf bound to a stored parameter, converted to `T`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, TensorError> {
        self.push(store.value(id).cast(), Op::Param(id), "param")
    }

    /// Folds pending train-mode batch statistics into the running
    /// statistics of `store` with an exponential moving average.
    pub fn commit_running_stats(&mut self, store: &mut ParamStore) {
        for u in self.running.drain(..) {
            let m = u.momentum;
            for (r, b) in store.value_mut(u.mean).data_mut().iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in store.value_mut(u.var).data_mut().iter_mut().zip(&u.batch_var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }

    /// Accumulates `d loss / d p` into the gradient buffer of every
    /// parameter reachable from `loss`. Calling it again without
    /// [`ParamStore::zero_grad`] adds the gradients a second time.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<(), TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &gy, &mut grads, store);
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>], store: &mut ParamStore) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate_grad(*id, gy.iter().map(|g| g.as_f64())),
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(grads, *a, gy.iter().copied());
                }
                if wants(*b) {
                    acc(grads, *b, gy.iter().copied());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(grads, *a, gy.iter().copied());
                }
                if wants(*b) {
                    acc(grads, *b, gy.iter().map(|&g| -g));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(grads, *a, gy.iter().zip(val(*b)).map(|(&g, &v)| g * v));
                }
                if wants(*b) {
                    acc(grads, *b, gy.iter().zip(val(*a)).map(|(&g, &v)| g * v));
                }
            }
            Op::Affine { x, scale } => acc(grads, *x, gy.iter().map(|&g| g * *scale)),
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    acc(grads, *x, gy.iter().copied());
                }
                if wants(*bias) {
                    let d = self.nodes[bias.0].value.numel();
                    let mut gb = vec![T::zero(); d];
                    for row in gy.chunks_exact(d) {
                        for (a, &g) in gb.iter_mut().zip(row) {
                            *a = *a + g;
                        }
                    }
                    acc(grads, *bias, gb.into_iter());
                }
            }
            Op::ScaleRows { x, s } => {
                let sv = val(*s);
                let row = gy.len() / sv.len().max(1);
                if wants(*x) {
                    acc(grads, *x, gy.iter().enumerate().map(|(k, &g)| g * sv[k / row]));
                }
                if wants(*s) {
                    let xv = val(*x);
                    let gs: Vec<T> = (0..sv.len())
                        .map(|b| {
                            let r = b * row..(b + 1) * row;
                            gy[r.clone()].iter().zip(&xv[r]).map(|(&g, &v)| g * v).sum()
                        })
                        .collect();
                    acc(grads, *s, gs.into_iter());
                }
            }
            Op::MatMul { a, b, plan } => {
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if wants(*a) {
                    let bv = val(*b);
                    let mut ga = vec![T::zero(); self.nodes[a.0].value.numel()];
                    for &(ao, bo, co) in &plan.slices {
                        // dA = dC · Bᵀ
                        gemm(
                            &gy[co..],
                            MatView::row_major(m, n),
                            &bv[bo..],
                            MatView::row_major(k, n).t(),
                            T::one(),
                            &mut ga[ao..],
                            MatView::row_major(m, k),
                        );
                    }
                    acc(grads, *a, ga.into_iter());
                }
                if wants(*b) {
                    let av = val(*a);
                    let mut gb = vec![T::zero(); self.nodes[b.0].value.numel()];
                    for &(ao, bo, co) in &plan.slices {
                        // dB = Aᵀ · dC
                        gemm(
                            &av[ao..],
                            MatView::row_major(m, k).t(),
                            &gy[co..],
                            MatView::row_major(m, n),
                            T::one(),
                            &mut gb[bo..],
                            MatView::row_major(k, n),
                        );
                    }
                    acc(grads, *b, gb.into_iter());
                }
            }
            Op::Reshape(x) => acc(grads, *x, gy.iter().copied()),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (k, &a) in axes.iter().enumerate() {
                    inverse[a] = k;
                }
                let (_, g) = permute_data(gy, node.value.shape(), &inverse);
                acc(grads, *x, g.into_iter());
            }
            Op::Relu(x) => acc(grads, *x, gy.iter().zip(val(*x)).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })),
            Op::Sigmoid(x) => acc(grads, *x, gy.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s))),
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| o * len * inner + l * inner + i;
                        let dot: T = (0..len).map(|l| gy[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = y[at(l)] * (gy[at(l)] - dot);
                        }
                    }
                }
                acc(grads, *x, gx.into_iter());
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); self.nodes[x.0].value.numel()];
                for (&src, &g) in argmax.iter().zip(gy) {
                    gx[src] = gx[src] + g;
                }
                acc(grads, *x, gx.into_iter());
            }
            Op::Mean { x, axis } => {
                let (outer, len, inner) = axis_split(self.nodes[x.0].value.shape(), *axis);
                let scale = T::one() / T::cst(len as f64);
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gx[(o * len + l) * inner + i] = gy[o * inner + i] * scale;
                        }
                    }
                }
                acc(grads, *x, gx.into_iter());
            }
            Op::SumAll(x) => {
                let n = self.nodes[x.0].value.numel();
                acc(grads, *x, std::iter::repeat_n(gy[0], n));
            }
            Op::Conv1d { x, w, b, stride, pad, cols } => {
                self.conv1d_backward(node, *x, *w, *b, *stride, *pad, cols, gy, grads);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let shape = self.nodes[x.0].value.shape();
                let (bsz, c) = (shape[0], shape[1]);
                let l: usize = shape[2..].iter().product();
                let n = T::cst((bsz * l) as f64);
                let gam = val(*gamma);
                let mut gx = vec![T::zero(); gy.len()];
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
                    for bi in 0..bsz {
                        let r = (bi * c + ch) * l..(bi * c + ch + 1) * l;
                        sum_g = sum_g + lane_sum(&gy[r.clone()]);
                        sum_gx = sum_gx + lane_dot(&gy[r.clone()], &xhat[r]);
                    }
                    gg[ch] = sum_gx;
                    gbeta[ch] = sum_g;
                    let s = gam[ch] * inv_std[ch];
                    let (mg, mgx) = (sum_g / n, sum_gx / n);
                    for bi in 0..bsz {
                        let off = (bi * c + ch) * l;
                        let (dst, g, h) = (&mut gx[off..off + l], &gy[off..off + l], &xhat[off..off + l]);
                        if *train {
                            for k in 0..l {
                                dst[k] = s * (g[k] - mg - h[k] * mgx);
                            }
                        } else {
                            for k in 0..l {
                                dst[k] = s * g[k];
                            }
                        }
                    }
                }
                if wants(*x) {
                    acc(grads, *x, gx.into_iter());
                }
                if wants(*gamma) {
                    acc(grads, *gamma, gg.into_iter());
                }
                if wants(*beta) {
                    acc(grads, *beta, gbeta.into_iter());
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = val(*gamma);
                let d = gam.len();
                let dn = T::cst(d as f64);
                let mut gx = vec![T::zero(); gy.len()];
                let mut gg = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                for (r, (grow, hrow)) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    let (mut sum_dh, mut sum_dhh) = (T::zero(), T::zero());
                    for j in 0..d {
                        let dh = grow[j] * gam[j];
                        sum_dh = sum_dh + dh;
                        sum_dhh = sum_dhh + dh * hrow[j];
                        gg[j] = gg[j] + grow[j] * hrow[j];
                        gbeta[j] = gbeta[j] + grow[j];
                    }
                    for j in 0..d {
                        let dh = grow[j] * gam[j];
                        gx[r * d + j] = inv_std[r] * (dh - (sum_dh + hrow[j] * sum_dhh) / dn);
                    }
                }
                if wants(*x) {
                    acc(grads, *x, gx.into_iter());
                }
                if wants(*gamma) {
                    acc(grads, *gamma, gg.into_iter());
                }
                if wants(*beta) {
                    acc(grads, *beta, gbeta.into_iter());
                }
            }
            Op::CrossEntropy { p, labels, clamp } => {
                let pv = val(*p);
                let k = pv.len() / labels.len();
                let scale = gy[0] / T::cst(labels.len() as f64);
                let mut gp = vec![T::zero(); pv.len()];
                for (row, &label) in labels.iter().enumerate() {
                    let q = pv[row * k + label];
                    if q > *clamp {
                        gp[row * k + label] = -scale / q;
                    }
                }
                acc(grads, *p, gp.into_iter());
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        node: &Node<T>,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: &[T],
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let xs = self.nodes[x.0].value.shape();
        let (bsz, cin, len) = (xs[0], xs[1], xs[2]);
        let ws = self.nodes[w.0].value.shape();
        let (cout, kw) = (ws[0], ws[2]);
        let lout = node.value.shape()[2];
        let ck = cin * kw;
        let bl = bsz * lout;

        // dY laid out as [Cout, B·Lout] to match the forward GEMM.
        let mut gyt = vec![T::zero(); cout * bl];
        for bi in 0..bsz {
            for o in 0..cout {
                let src = &gy[(bi * cout + o) * lout..][..lout];
                gyt[o * bl + bi * lout..][..lout].copy_from_slice(src);
            }
        }
        if self.nodes[w.0].needs_grad {
            let mut gw = vec![T::zero(); cout * ck];
            gemm(&gyt, MatView::row_major(cout, bl), cols, MatView::row_major(ck, bl).t(), T::zero(), &mut gw, MatView::row_major(cout, ck));
            acc(grads, w, gw.into_iter());
        }
        if self.nodes[b.0].needs_grad {
            let gb: Vec<T> = gyt.chunks_exact(bl).map(lane_sum).collect();
            acc(grads, b, gb.into_iter());
        }
        if self.nodes[x.0].needs_grad {
            let wv = self.nodes[w.0].value.data();
            let mut gcols = vec![T::zero(); ck * bl];
            gemm(wv, MatView::row_major(cout, ck).t(), &gyt, MatView::row_major(cout, bl), T::zero(), &mut gcols, MatView::row_major(ck, bl));
            let mut gx = vec![T::zero(); bsz * cin * len];
            for c in 0..cin {
                for t in 0..kw {
                    let (lo, hi) = tap_range(t, stride, pad, len, lout);
                    let row = &gcols[(c * kw + t) * bl..][..bl];
                    for bi in 0..bsz {
                        let dst = &mut gx[(bi * cin + c) * len..][..len];
                        let src = &row[bi * lout..][..lout];
                        for l in lo..hi {
                            let p = l * stride + t - pad;
                            dst[p] = dst[p] + src[l];
                        }
                    }
                }
            }
            acc(grads, x, gx.into_iter());
        }
    }
}

fn acc<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, delta: impl Iterator<Item = T>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        slot @ None => *slot = Some(delta.collect()),
    }
}

pub(super) fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::AddBias { x, bias } => vec![*x, *bias],
        Op::ScaleRows { x, s } => vec![*x, *s],
        Op::Affine { x, .. }
        | Op::Reshape(x)
        | Op::Permute { x, .. }
        | Op::Relu(x)
        | Op::Sigmoid(x)
        | Op::Softmax { x, .. }
        | Op::MaxPool { x, .. }
        | Op::Mean { x, .. }
        | Op::SumAll(x) => vec![*x],
        Op::Conv1d { x, w, b, .. } => vec![*x, *w, *b],
        Op::BatchNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::CrossEntropy { p, .. } => vec![*p],
    }
}
