//! Define-by-run autodiff tape.
//!
//! Every forward operation appends a node holding its result and a backward
//! rule. Nodes are append-only, so index order is a topological order and a
//! single reverse sweep from the loss populates every gradient, including
//! gradients of intermediate activations (the attention computation reads
//! the gradient of the feature grid directly).

use super::linalg::{col2im, im2col, matmul, matmul_at, matmul_bt};
use super::{Elem, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Batch-norm running statistics, owned by the caller and updated in place
/// during train-mode forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Elem> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const PROB_FLOOR: f64 = 1e-12;

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    parents: Vec<VarId>,
    backward: Option<BackFn<T>>,
}

pub struct Tape<T: Elem> {
    nodes: Vec<Node<T>>,
    backward_runs: usize,
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_runs: 0,
        }
    }

    /// Number of completed reverse traversals on this tape.
    pub fn backward_runs(&self) -> usize {
        self.backward_runs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad: requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: VarId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<VarId>, backward: BackFn<T>) -> Result<VarId> {
        value.check_finite("forward op")?;
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            parents,
            backward: if needs_grad { Some(backward) } else { None },
        });
        Ok(VarId(self.nodes.len() - 1))
    }

    fn accumulate(&mut self, id: VarId, delta: Tensor<T>) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += *dv;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    /// One reverse traversal from a scalar loss. Gradients accumulate across
    /// multiple uses of a tensor.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Autodiff("loss is not on this tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.nodes[loss.0].grad = Some(Tensor::from_vec(
            self.nodes[loss.0].value.shape(),
            vec![T::one()],
        )?);
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || self.nodes[idx].backward.is_none() {
                continue;
            }
            let parents = self.nodes[idx].parents.clone();
            let needs: Vec<bool> = parents.iter().map(|p| self.nodes[p.0].needs_grad).collect();
            let out_grad = self.nodes[idx].grad.take().unwrap();
            let back = self.nodes[idx].backward.as_ref().unwrap();
            let parent_grads = back(&out_grad, &needs);
            self.nodes[idx].grad = Some(out_grad);
            for (parent, grad) in parents.iter().zip(parent_grads) {
                if let Some(g) = grad {
                    g.check_finite("backward op")?;
                    self.accumulate(*parent, g);
                }
            }
        }
        self.backward_runs += 1;
        Ok(())
    }

    // ---- elementwise and reduction ops ----

    fn same_shape(&self, a: VarId, b: VarId, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{op}: shape {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        self.push(
            out,
            vec![a, b],
            Box::new(|dy, needs| {
                vec![
                    needs[0].then(|| dy.clone()),
                    needs[1].then(|| dy.clone()),
                ]
            }),
        )
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b, "sub")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        self.push(
            out,
            vec![a, b],
            Box::new(|dy, needs| {
                vec![
                    needs[0].then(|| dy.clone()),
                    needs[1].then(|| dy.map(|v| -v)),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b, "mul")?;
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let mut out = av.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(bv.data()) {
            *o *= v;
        }
        self.push(
            out,
            vec![a, b],
            Box::new(move |dy, needs| {
                let da = needs[0].then(|| {
                    let mut g = dy.clone();
                    for (gv, &v) in g.data_mut().iter_mut().zip(bv.data()) {
                        *gv *= v;
                    }
                    g
                });
                let db = needs[1].then(|| {
                    let mut g = dy.clone();
                    for (gv, &v) in g.data_mut().iter_mut().zip(av.data()) {
                        *gv *= v;
                    }
                    g
                });
                vec![da, db]
            }),
        )
    }

    pub fn scale(&mut self, a: VarId, c: T) -> Result<VarId> {
        let out = self.value(a).map(|v| v * c);
        self.push(
            out,
            vec![a],
            Box::new(move |dy, _| vec![Some(dy.map(|v| v * c))]),
        )
    }

    pub fn add_scalar(&mut self, a: VarId, c: T) -> Result<VarId> {
        let out = self.value(a).map(|v| v + c);
        self.push(out, vec![a], Box::new(|dy, _| vec![Some(dy.clone())]))
    }

    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let shape = self.value(a).shape().to_vec();
        let total: T = self.value(a).data().iter().copied().sum();
        self.push(
            Tensor::scalar(total),
            vec![a],
            Box::new(move |dy, _| vec![Some(Tensor::full(&shape, dy.item()))]),
        )
    }

    pub fn mean(&mut self, a: VarId) -> Result<VarId> {
        let n = T::from_f64(self.value(a).numel() as f64);
        let s = self.sum(a)?;
        self.scale(s, T::one() / n)
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        let av = self.value(a).clone();
        let out = av.map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(
            out,
            vec![a],
            Box::new(move |dy, _| {
                let mut g = dy.clone();
                for (gv, &v) in g.data_mut().iter_mut().zip(av.data()) {
                    if v <= T::zero() {
                        *gv = T::zero();
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Elementwise `ln(max(x, floor))`; gradient is zero where the clamp is
    /// active, which makes `0 * ln 0` contribute nothing to the entropy.
    pub fn ln_clamped(&mut self, a: VarId, floor: T) -> Result<VarId> {
        let av = self.value(a).clone();
        let out = av.map(|v| v.max(floor).ln());
        self.push(
            out,
            vec![a],
            Box::new(move |dy, _| {
                let mut g = dy.clone();
                for (gv, &v) in g.data_mut().iter_mut().zip(av.data()) {
                    *gv = if v > floor { *gv / v } else { T::zero() };
                }
                vec![Some(g)]
            }),
        )
    }

    // ---- layer ops ----

    /// Affine map: `x (N x D) * w (D x M) + b (M)`.
    pub fn dense(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (n, d) = self.value(x).dims2()?;
        let (wd, m) = self.value(w).dims2()?;
        if wd != d {
            return Err(Error::Shape(format!(
                "dense: input inner dim {d} vs weight inner dim {wd}"
            )));
        }
        if self.value(b).numel() != m {
            return Err(Error::Shape(format!(
                "dense: bias length {} vs output dim {m}",
                self.value(b).numel()
            )));
        }
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let mut out = matmul(xv.data(), wv.data(), n, d, m);
        let bias = self.value(b).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        self.push(
            Tensor::from_vec(&[n, m], out)?,
            vec![x, w, b],
            Box::new(move |dy, needs| {
                let dx = needs[0].then(|| {
                    Tensor::from_vec(&[n, d], matmul_bt(dy.data(), wv.data(), n, m, d)).unwrap()
                });
                let dw = needs[1].then(|| {
                    Tensor::from_vec(&[d, m], matmul_at(xv.data(), dy.data(), n, d, m)).unwrap()
                });
                let db = needs[2].then(|| {
                    let mut g = vec![T::zero(); m];
                    for row in dy.data().chunks(m) {
                        for (gv, &v) in g.iter_mut().zip(row) {
                            *gv += v;
                        }
                    }
                    Tensor::from_vec(&[m], g).unwrap()
                });
                vec![dx, dw, db]
            }),
        )
    }

    /// 2-D convolution (cross-correlation), im2col + matmul.
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (oc, ic, kh, kw) = self.value(w).dims4()?;
        if ic != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels but kernels expect {ic}"
            )));
        }
        if self.value(b).numel() != oc {
            return Err(Error::Shape(format!(
                "conv2d: bias length {} vs {oc} kernels",
                self.value(b).numel()
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let k = ic * kh * kw;
        let cols = im2col(xv.data(), n, c, h, wd, kh, kw, stride, pad, oh, ow);
        // out[oc, n*oh*ow] then transpose batch to front
        let flat = matmul(wv.data(), &cols, oc, k, n * oh * ow);
        let bias = self.value(b).data().to_vec();
        let mut out = vec![T::zero(); n * oc * oh * ow];
        for o in 0..oc {
            for bi in 0..n {
                let src = &flat[(o * n + bi) * oh * ow..(o * n + bi + 1) * oh * ow];
                let dst = &mut out[(bi * oc + o) * oh * ow..(bi * oc + o + 1) * oh * ow];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias[o];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[n, oc, oh, ow], out)?,
            vec![x, w, b],
            Box::new(move |dy, needs| {
                // regroup dy to [oc, n*oh*ow]
                let mut dyt = vec![T::zero(); oc * n * oh * ow];
                for bi in 0..n {
                    for o in 0..oc {
                        let src = &dy.data()[(bi * oc + o) * oh * ow..(bi * oc + o + 1) * oh * ow];
                        dyt[(o * n + bi) * oh * ow..(o * n + bi + 1) * oh * ow]
                            .copy_from_slice(src);
                    }
                }
                let cols = im2col(xv.data(), n, c, h, wd, kh, kw, stride, pad, oh, ow);
                let dx = needs[0].then(|| {
                    let dcols = matmul_at(wv.data(), &dyt, oc, k, n * oh * ow);
                    Tensor::from_vec(
                        &[n, c, h, wd],
                        col2im(&dcols, n, c, h, wd, kh, kw, stride, pad, oh, ow),
                    )
                    .unwrap()
                });
                let dw = needs[1].then(|| {
                    Tensor::from_vec(
                        &[oc, ic, kh, kw],
                        matmul_bt(&dyt, &cols, oc, n * oh * ow, k),
                    )
                    .unwrap()
                });
                let db = needs[2].then(|| {
                    let g: Vec<T> = (0..oc)
                        .map(|o| dyt[o * n * oh * ow..(o + 1) * n * oh * ow].iter().copied().sum())
                        .collect();
                    Tensor::from_vec(&[oc], g).unwrap()
                });
                vec![dx, dw, db]
            }),
        )
    }

    /// Square-window max pooling. Gradient flows to the argmax only; ties
    /// resolve to the first element in row-major window order.
    pub fn maxpool2d(&mut self, x: VarId, window: usize, stride: usize) -> Result<VarId> {
        if window < 1 || stride < 1 {
            return Err(Error::Shape("maxpool2d: window and stride must be >= 1".into()));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        if window > h || window > w {
            return Err(Error::Shape(format!(
                "maxpool2d: window {window} larger than input {h}x{w}"
            )));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let xv = self.value(x);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for bc in 0..n * c {
            let plane = &xv.data()[bc * h * w..(bc + 1) * h * w];
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    for ki in 0..window {
                        for kj in 0..window {
                            let idx = (oi * stride + ki) * w + oj * stride + kj;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[(bc * oh + oi) * ow + oj] = best;
                    argmax[(bc * oh + oi) * ow + oj] = bc * h * w + best_idx;
                }
            }
        }
        let in_len = n * c * h * w;
        self.push(
            Tensor::from_vec(&[n, c, oh, ow], out)?,
            vec![x],
            Box::new(move |dy, _| {
                let mut g = vec![T::zero(); in_len];
                for (&src, &d) in argmax.iter().zip(dy.data()) {
                    g[src] += d;
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], g).unwrap())]
            }),
        )
    }

    /// Per-channel max over the full spatial extent: B x C x H x W -> B x C.
    /// Same first-occurrence tie rule as `maxpool2d`.
    pub fn spatial_max(&mut self, x: VarId) -> Result<VarId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); n * c];
        let mut argmax = vec![0usize; n * c];
        for bc in 0..n * c {
            let plane = &xv.data()[bc * h * w..(bc + 1) * h * w];
            let mut best = T::neg_infinity();
            let mut best_idx = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > best {
                    best = v;
                    best_idx = i;
                }
            }
            out[bc] = best;
            argmax[bc] = bc * h * w + best_idx;
        }
        let in_len = n * c * h * w;
        self.push(
            Tensor::from_vec(&[n, c], out)?,
            vec![x],
            Box::new(move |dy, _| {
                let mut g = vec![T::zero(); in_len];
                for (&src, &d) in argmax.iter().zip(dy.data()) {
                    g[src] += d;
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], g).unwrap())]
            }),
        )
    }

    /// Per-channel spatial mean: B x C x H x W -> B x C.
    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let area = T::from_f64((h * w) as f64);
        let xv = self.value(x);
        let out: Vec<T> = (0..n * c)
            .map(|bc| {
                xv.data()[bc * h * w..(bc + 1) * h * w].iter().copied().sum::<T>() / area
            })
            .collect();
        self.push(
            Tensor::from_vec(&[n, c], out)?,
            vec![x],
            Box::new(move |dy, _| {
                let mut g = vec![T::zero(); n * c * h * w];
                for bc in 0..n * c {
                    let d = dy.data()[bc] / area;
                    for v in &mut g[bc * h * w..(bc + 1) * h * w] {
                        *v = d;
                    }
                }
                vec![Some(Tensor::from_vec(&[n, c, h, w], g).unwrap())]
            }),
        )
    }

    /// Row-wise softmax with max subtraction. Accepts a 1-D vector (one row)
    /// or an N x C matrix.
    pub fn softmax(&mut self, logits: VarId) -> Result<VarId> {
        let shape = self.value(logits).shape().to_vec();
        let cols = *shape.last().ok_or_else(|| Error::Shape("softmax: rank-0 input".into()))?;
        let mut out = self.value(logits).clone();
        for row in out.data_mut().chunks_mut(cols) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let yv = out.clone();
        self.push(
            out,
            vec![logits],
            Box::new(move |dy, _| {
                let mut g = dy.clone();
                for (grow, yrow) in g.data_mut().chunks_mut(cols).zip(yv.data().chunks(cols)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&d, &y)| d * y).sum();
                    for (gv, &y) in grow.iter_mut().zip(yrow) {
                        *gv = y * (*gv - dot);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Mean negative log-likelihood of the labelled classes. `probs` is a
    /// 1-D simplex vector or an N x C matrix of simplex rows; probabilities
    /// are clamped at `PROB_FLOOR` before the log.
    pub fn cross_entropy(&mut self, probs: VarId, labels: &[usize]) -> Result<VarId> {
        let shape = self.value(probs).shape().to_vec();
        let cols = *shape.last().ok_or_else(|| Error::Shape("cross_entropy: rank-0 input".into()))?;
        let rows = self.value(probs).numel() / cols;
        if labels.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy: {rows} rows vs {} labels",
                labels.len()
            )));
        }
        for &l in labels {
            if l >= cols {
                return Err(Error::Shape(format!(
                    "cross_entropy: label {l} out of range for {cols} classes"
                )));
            }
        }
        let floor = T::from_f64(PROB_FLOOR);
        let pv = self.value(probs).clone();
        let inv_n = T::one() / T::from_f64(rows as f64);
        let loss: T = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -(pv.data()[r * cols + l].max(floor)).ln())
            .sum::<T>()
            * inv_n;
        let labels = labels.to_vec();
        self.push(
            Tensor::scalar(loss),
            vec![probs],
            Box::new(move |dy, _| {
                let d = dy.item();
                let mut g = Tensor::zeros(&shape);
                for (r, &l) in labels.iter().enumerate() {
                    let p = pv.data()[r * cols + l];
                    if p > floor {
                        g.data_mut()[r * cols + l] = -d * inv_n / p;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Batch normalization over (batch, height, width) per channel.
    pub fn batchnorm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        stats: &mut BnStats<T>,
        mode: Mode,
    ) -> Result<VarId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!(
                "batchnorm: gamma/beta must have {c} channels"
            )));
        }
        let m = n * h * w;
        let eps = T::from_f64(BN_EPS);
        let xv = self.value(x).clone();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let mf = T::from_f64(m as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += xv.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w]
                            .iter()
                            .copied()
                            .sum::<T>();
                    }
                    mean[ch] = s / mf;
                    let mut sq = T::zero();
                    for b in 0..n {
                        for &v in &xv.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w] {
                            let d = v - mean[ch];
                            sq += d * d;
                        }
                    }
                    var[ch] = sq / mf;
                }
                let mom = T::from_f64(BN_MOMENTUM);
                let one_m = T::one() - mom;
                for ch in 0..c {
                    stats.mean.data_mut()[ch] = mom * stats.mean.data()[ch] + one_m * mean[ch];
                    stats.var.data_mut()[ch] = mom * stats.var.data()[ch] + one_m * var[ch];
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut xhat = vec![T::zero(); n * c * h * w];
        let mut out = vec![T::zero(); n * c * h * w];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for i in 0..h * w {
                    let xh = (xv.data()[base + i] - mean[ch]) * inv_std[ch];
                    xhat[base + i] = xh;
                    out[base + i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let train = mode == Mode::Train;
        self.push(
            Tensor::from_vec(&[n, c, h, w], out)?,
            vec![x, gamma, beta],
            Box::new(move |dy, needs| {
                let mf = T::from_f64(m as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * h * w;
                        for i in 0..h * w {
                            let d = dy.data()[base + i];
                            dbeta[ch] += d;
                            dgamma[ch] += d * xhat[base + i];
                        }
                    }
                }
                let dx = needs[0].then(|| {
                    let mut g = vec![T::zero(); n * c * h * w];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * h * w;
                            let scale = gv[ch] * inv_std[ch];
                            for i in 0..h * w {
                                let d = dy.data()[base + i];
                                g[base + i] = if train {
                                    scale
                                        * (d - dbeta[ch] / mf
                                            - xhat[base + i] * dgamma[ch] / mf)
                                } else {
                                    scale * d
                                };
                            }
                        }
                    }
                    Tensor::from_vec(&[n, c, h, w], g).unwrap()
                });
                let dg = needs[1].then(|| Tensor::from_vec(&[c], dgamma.clone()).unwrap());
                let db = needs[2].then(|| Tensor::from_vec(&[c], dbeta.clone()).unwrap());
                vec![dx, dg, db]
            }),
        )
    }

    /// Mean of consecutive row groups: N x D -> (N/group) x D.
    pub fn mean_rows_grouped(&mut self, x: VarId, group: usize) -> Result<VarId> {
        let (n, d) = self.value(x).dims2()?;
        if group == 0 || n % group != 0 {
            return Err(Error::Shape(format!(
                "mean_rows_grouped: {n} rows not divisible by group {group}"
            )));
        }
        let out_rows = n / group;
        let inv = T::one() / T::from_f64(group as f64);
        let xv = self.value(x);
        let mut out = vec![T::zero(); out_rows * d];
        for r in 0..n {
            let dst = &mut out[(r / group) * d..(r / group + 1) * d];
            for (o, &v) in dst.iter_mut().zip(&xv.data()[r * d..(r + 1) * d]) {
                *o += v * inv;
            }
        }
        self.push(
            Tensor::from_vec(&[out_rows, d], out)?,
            vec![x],
            Box::new(move |dy, _| {
                let mut g = vec![T::zero(); n * d];
                for r in 0..n {
                    let src = &dy.data()[(r / group) * d..(r / group + 1) * d];
                    for (gv, &v) in g[r * d..(r + 1) * d].iter_mut().zip(src) {
                        *gv = v * inv;
                    }
                }
                vec![Some(Tensor::from_vec(&[n, d], g).unwrap())]
            }),
        )
    }

    /// Row-wise L2 normalization of an N x D matrix.
    pub fn l2_normalize_rows(&mut self, x: VarId) -> Result<VarId> {
        let (n, d) = self.value(x).dims2()?;
        let xv = self.value(x).clone();
        let mut out = vec![T::zero(); n * d];
        let mut norms = vec![T::zero(); n];
        for r in 0..n {
            let row = &xv.data()[r * d..(r + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(Error::Shape(format!(
                    "l2_normalize_rows: row {r} has zero norm"
                )));
            }
            norms[r] = norm;
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let yv = out.clone();
        self.push(
            Tensor::from_vec(&[n, d], out)?,
            vec![x],
            Box::new(move |dy, _| {
                let mut g = vec![T::zero(); n * d];
                for r in 0..n {
                    let y = &yv[r * d..(r + 1) * d];
                    let dyr = &dy.data()[r * d..(r + 1) * d];
                    let dot: T = y.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
                    for i in 0..d {
                        g[r * d + i] = (dyr[i] - y[i] * dot) / norms[r];
                    }
                }
                vec![Some(Tensor::from_vec(&[n, d], g).unwrap())]
            }),
        )
    }

    /// Mean hinge over triplets of row indices into an N x D embedding
    /// matrix: `(1/N) sum max(d_ap^2 - d_an^2 + margin, 0)`. An empty
    /// triplet list yields loss 0 with zero gradients. Clamped (inactive)
    /// triplets contribute zero gradient.
    pub fn triplet_loss(
        &mut self,
        embeddings: VarId,
        triplets: &[(usize, usize, usize)],
        margin: T,
    ) -> Result<VarId> {
        let (n, d) = self.value(embeddings).dims2()?;
        for &(a, p, ng) in triplets {
            if a >= n || p >= n || ng >= n {
                return Err(Error::Shape(format!(
                    "triplet_loss: index ({a},{p},{ng}) out of range for {n} rows"
                )));
            }
        }
        let ev = self.value(embeddings).clone();
        let dist2 = |a: usize, b: usize| -> T {
            ev.data()[a * d..(a + 1) * d]
                .iter()
                .zip(&ev.data()[b * d..(b + 1) * d])
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum()
        };
        let count = triplets.len();
        let mut loss = T::zero();
        let mut active = Vec::with_capacity(count);
        for &(a, p, ng) in triplets {
            let v = dist2(a, p) - dist2(a, ng) + margin;
            if v > T::zero() {
                loss += v;
                active.push((a, p, ng));
            }
        }
        let inv_n = if count > 0 {
            T::one() / T::from_f64(count as f64)
        } else {
            T::zero()
        };
        loss *= inv_n;
        self.push(
            Tensor::scalar(loss),
            vec![embeddings],
            Box::new(move |dy, _| {
                let scale = dy.item() * inv_n;
                let two = T::from_f64(2.0);
                let mut g = vec![T::zero(); n * d];
                for &(a, p, ng) in &active {
                    for i in 0..d {
                        let fa = ev.data()[a * d + i];
                        let fp = ev.data()[p * d + i];
                        let fn_ = ev.data()[ng * d + i];
                        g[a * d + i] += scale * two * (fn_ - fp);
                        g[p * d + i] += scale * two * (fp - fa);
                        g[ng * d + i] += scale * two * (fa - fn_);
                    }
                }
                vec![Some(Tensor::from_vec(&[n, d], g).unwrap())]
            }),
        )
    }
}
