//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its output value and whatever it
//! saved for the backward pass. [`Tape::backward`] walks the nodes in exact
//! reverse order of recording and accumulates gradients additively wherever
//! a value fans out to several consumers.

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Segments, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-column batch statistics produced by a training-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op<T> {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Relu { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<f64>, train: bool },
    Splice { x: Var, offsets: Vec<i32>, segs: Arc<Segments> },
    PhoneLookup { w: Var, rows: Vec<u32>, taps: usize },
    ExpandRows { x: Var, segs: Arc<Segments> },
    StatsPool { x: Var, segs: Arc<Segments>, mean: Vec<f64>, std: Vec<f64> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SegmentMse { pred: Var, target: Vec<T>, segs: Arc<Segments> },
    Sum { x: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
}

struct Node<T> {
    value: Tensor<T>,
    /// Full-precision value of scalar reductions.
    exact: Option<f64>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward pass for later gradient propagation.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, ParamId)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
}

fn expect_matrix<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize), NumericsError> {
    if t.shape().len() != 2 {
        return Err(shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_exact(value, None, op, requires_grad)
    }

    fn push_exact(&mut self, value: Tensor<T>, exact: Option<f64>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, exact, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.var(store.value(id).clone());
        self.params.push((v, id));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of `v`, using the full-precision reduction when one exists.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.exact.unwrap_or_else(|| node.value.item().as_f64())
    }

    /// `x · w + b` for `x: N×D_in`, `w: D_in×D_out`, `b: D_out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let (n, din) = expect_matrix("affine", self.value(x))?;
        let (wr, dout) = expect_matrix("affine", self.value(w))?;
        if wr != din {
            return Err(shape_err("affine", format!("input has {din} columns but weight has {wr} rows")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [dout] {
                return Err(shape_err(
                    "affine",
                    format!("bias shape {:?} does not match output width {dout}", self.value(b).shape()),
                ));
            }
        }
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), false, beta, &mut out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.needs(&inputs);
        Ok(self.push(Tensor::new(vec![n, dout], out)?, Op::Affine { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(p, q)| *p + *q).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| if e > T::zero() || e.is_nan() { e } else { T::zero() }).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    /// Training-mode batch normalization over the rows of `x`.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), NumericsError> {
        let (n, d) = expect_matrix("batchnorm", self.value(x))?;
        if n < 2 {
            return Err(NumericsError::Invalid {
                op: "batchnorm",
                detail: format!("training mode needs at least 2 rows, got {n}"),
            });
        }
        self.check_bn_params(gamma, beta, d)?;
        let xv = self.value(x).data();
        let mut mean = vec![0.0f64; d];
        for row in xv.chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0f64; d];
        for row in xv.chunks_exact(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let c = v.as_f64() - m;
                *s += c * c;
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, &mean, &inv_std, n, d)?;
        let rg = self.needs(&[x, gamma, beta]);
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: true }, rg);
        Ok((v, BatchStats { mean, var }))
    }

    /// Inference-mode batch normalization using stored running statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let (n, d) = expect_matrix("batchnorm", self.value(x))?;
        self.check_bn_params(gamma, beta, d)?;
        if running_mean.len() != d || running_var.len() != d {
            return Err(shape_err("batchnorm", "running statistics width".into()));
        }
        let mean: Vec<f64> = running_mean.iter().map(|v| v.as_f64()).collect();
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v.as_f64() + eps).sqrt()).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, &mean, &inv_std, n, d)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false }, rg))
    }

    fn check_bn_params(&self, gamma: Var, beta: Var, d: usize) -> Result<(), NumericsError> {
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(shape_err("batchnorm", format!("scale/shift must have shape [{d}]")));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        n: usize,
        d: usize,
    ) -> Result<(Vec<T>, Tensor<T>), NumericsError> {
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(n * d);
        let mut out = Vec::with_capacity(n * d);
        for row in xv.chunks_exact(d) {
            for j in 0..d {
                let h = T::of_f64((row[j].as_f64() - mean[j]) * inv_std[j]);
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        Ok((xhat, Tensor::new(vec![n, d], out)?))
    }

    /// Concatenates `x[t + o]` for every offset `o`, clamping at the edges
    /// of the segment that contains frame `t`.
    pub fn splice(&mut self, x: Var, offsets: &[i32], segs: &Arc<Segments>) -> Result<Var, NumericsError> {
        if offsets.is_empty() {
            return Err(NumericsError::Invalid { op: "splice", detail: "empty offset list".into() });
        }
        let (t, d) = expect_matrix("splice", self.value(x))?;
        if t != segs.total() {
            return Err(shape_err("splice", format!("{t} frames but segments cover {}", segs.total())));
        }
        let k = offsets.len();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(t * d * k);
        for row in 0..t {
            for &o in offsets {
                let src = segs.clamped(row, o);
                out.extend_from_slice(&xv[src * d..(src + 1) * d]);
            }
        }
        let rg = self.needs(&[x]);
        let value = Tensor::new(vec![t, d * k], out)?;
        Ok(self.push(value, Op::Splice { x, offsets: offsets.to_vec(), segs: Arc::clone(segs) }, rg))
    }

    /// `splice(onehot(phones)) · w` computed as a sum of gathered rows.
    ///
    /// `w` has `offsets.len() · phone_count` rows; block `k` holds the weights
    /// seen through offset `k`.
    pub fn phone_lookup(
        &mut self,
        w: Var,
        phones: &[u16],
        phone_count: usize,
        offsets: &[i32],
        segs: &Arc<Segments>,
    ) -> Result<Var, NumericsError> {
        if offsets.is_empty() {
            return Err(NumericsError::Invalid { op: "phone_lookup", detail: "empty offset list".into() });
        }
        let (wr, h) = expect_matrix("phone_lookup", self.value(w))?;
        let taps = offsets.len();
        if wr != taps * phone_count {
            return Err(shape_err("phone_lookup", format!("weight has {wr} rows, expected {}", taps * phone_count)));
        }
        if phones.len() != segs.total() {
            return Err(shape_err("phone_lookup", "phone count does not match segments".into()));
        }
        if let Some(p) = phones.iter().find(|&&p| p as usize >= phone_count) {
            return Err(NumericsError::Invalid {
                op: "phone_lookup",
                detail: format!("phone {p} outside [0, {phone_count})"),
            });
        }
        let t = phones.len();
        let mut rows = Vec::with_capacity(t * taps);
        for frame in 0..t {
            for (k, &o) in offsets.iter().enumerate() {
                rows.push((k * phone_count + phones[segs.clamped(frame, o)] as usize) as u32);
            }
        }
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); t * h];
        for (dst, idx) in out.chunks_exact_mut(h).zip(rows.chunks_exact(taps)) {
            for &r in idx {
                let src = &wv[r as usize * h..(r as usize + 1) * h];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o = *o + *s;
                }
            }
        }
        let rg = self.needs(&[w]);
        Ok(self.push(Tensor::new(vec![t, h], out)?, Op::PhoneLookup { w, rows, taps }, rg))
    }

    /// Broadcasts row `s` of `x` to every frame of segment `s`.
    pub fn expand_rows(&mut self, x: Var, segs: &Arc<Segments>) -> Result<Var, NumericsError> {
        let (s, d) = expect_matrix("expand_rows", self.value(x))?;
        if s != segs.count() {
            return Err(shape_err("expand_rows", format!("{s} rows for {} segments", segs.count())));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(segs.total() * d);
        for &o in segs.owners() {
            out.extend_from_slice(&xv[o as usize * d..(o as usize + 1) * d]);
        }
        let rg = self.needs(&[x]);
        let value = Tensor::new(vec![segs.total(), d], out)?;
        Ok(self.push(value, Op::ExpandRows { x, segs: Arc::clone(segs) }, rg))
    }

    /// Per-segment mean and standard deviation, `S × 2D`.
    pub fn stats_pool(&mut self, x: Var, segs: &Arc<Segments>, eps: f64) -> Result<Var, NumericsError> {
        let (t, d) = expect_matrix("stats_pool", self.value(x))?;
        if t == 0 {
            return Err(NumericsError::Invalid { op: "stats_pool", detail: "no frames".into() });
        }
        if t != segs.total() {
            return Err(shape_err("stats_pool", format!("{t} frames but segments cover {}", segs.total())));
        }
        let s = segs.count();
        let xv = self.value(x).data();
        let mut mean = vec![0.0f64; s * d];
        let mut std = vec![0.0f64; s * d];
        let mut out = Vec::with_capacity(s * 2 * d);
        for seg in 0..s {
            let range = segs.range(seg);
            let n = range.len() as f64;
            let m = &mut mean[seg * d..(seg + 1) * d];
            for row in range.clone() {
                for (acc, v) in m.iter_mut().zip(&xv[row * d..(row + 1) * d]) {
                    *acc += v.as_f64();
                }
            }
            m.iter_mut().for_each(|v| *v /= n);
            let sd = &mut std[seg * d..(seg + 1) * d];
            for row in range {
                for ((acc, v), mu) in sd.iter_mut().zip(&xv[row * d..(row + 1) * d]).zip(m.iter()) {
                    let c = v.as_f64() - mu;
                    *acc += c * c;
                }
            }
            sd.iter_mut().for_each(|v| *v = (*v / n + eps).sqrt());
            out.extend(m.iter().map(|&v| T::of_f64(v)));
            out.extend(sd.iter().map(|&v| T::of_f64(v)));
        }
        let rg = self.needs(&[x]);
        let value = Tensor::new(vec![s, 2 * d], out)?;
        Ok(self.push(value, Op::StatsPool { x, segs: Arc::clone(segs), mean, std }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumericsError> {
        let (n, k) = expect_matrix("softmax_ce", self.value(logits))?;
        if labels.len() != n {
            return Err(shape_err("softmax_ce", format!("{n} rows but {} labels", labels.len())));
        }
        if n == 0 {
            return Err(NumericsError::Invalid { op: "softmax_ce", detail: "no rows".into() });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            return Err(NumericsError::Invalid { op: "softmax_ce", detail: format!("label {l} outside [0, {k})") });
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0f64;
        for (row, &label) in lv.chunks_exact(k).zip(labels) {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[label].as_f64();
            probs.extend(row.iter().map(|v| (v.as_f64() - log_z).exp()));
        }
        let loss = total / n as f64;
        let rg = self.needs(&[logits]);
        let op = Op::SoftmaxCe { logits, labels: labels.to_vec(), probs };
        Ok(self.push_exact(Tensor::scalar(T::of_f64(loss)), Some(loss), op, rg))
    }

    /// `(1/S) Σ_s (1/τ_s) Σ_{t∈s} ‖target_t − pred_t‖²`.
    pub fn segment_mse(&mut self, pred: Var, target: &Tensor<T>, segs: &Arc<Segments>) -> Result<Var, NumericsError> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", pv.shape(), target.shape())));
        }
        let (t, f) = expect_matrix("mse", pv)?;
        if t != segs.total() {
            return Err(shape_err("mse", format!("{t} frames but segments cover {}", segs.total())));
        }
        let mut total = 0.0f64;
        for seg in 0..segs.count() {
            let range = segs.range(seg);
            let tau = range.len() as f64;
            let lo = range.start * f;
            let hi = range.end * f;
            let sq: f64 = pv.data()[lo..hi]
                .iter()
                .zip(&target.data()[lo..hi])
                .map(|(p, y)| {
                    let e = y.as_f64() - p.as_f64();
                    e * e
                })
                .sum();
            total += sq / tau;
        }
        let loss = total / segs.count() as f64;
        let rg = self.needs(&[pred]);
        let op = Op::SegmentMse { pred, target: target.data().to_vec(), segs: Arc::clone(segs) };
        Ok(self.push_exact(Tensor::scalar(T::of_f64(loss)), Some(loss), op, rg))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.needs(&[x]);
        self.push_exact(Tensor::scalar(T::of_f64(total)), Some(total), Op::Sum { x }, rg)
    }

    /// `Σ weight_i · term_i` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, NumericsError> {
        let mut total = 0.0f64;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(shape_err("weighted_sum", format!("term {:?} is not a scalar", self.value(v).shape())));
            }
            total += w * self.scalar(v);
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.needs(&vars);
        let op = Op::WeightedSum { terms: terms.to_vec() };
        Ok(self.push_exact(Tensor::scalar(T::of_f64(total)), Some(total), op, rg))
    }

    /// Propagates `d root / d node` to every leaf that requires a gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, NumericsError> {
        if self.value(root).len() != 1 {
            return Err(shape_err("backward", format!("root must be a scalar, got {:?}", self.value(root).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![T::one()])?);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        let params = self.params.iter().map(|&(v, id)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), NumericsError> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, din) = (xv.rows(), xv.cols());
                let dout = wv.cols();
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![T::zero(); n * din];
                    T::gemm(n, dout, din, gd, false, wv.data(), true, T::zero(), &mut dx);
                    self.accumulate(grads, *x, Tensor::new(vec![n, din], dx)?);
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![T::zero(); din * dout];
                    T::gemm(din, n, dout, xv.data(), true, gd, false, T::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::new(vec![din, dout], dw)?);
                }
                if let Some(b) = b {
                    let db = column_sums(gd, dout);
                    self.accumulate(grads, *b, Tensor::vector(db));
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Relu { x } => {
                let dx = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), dx)?);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let d = inv_std.len();
                let n = gd.len() / d;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                for (grow, hrow) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        let gv = grow[j].as_f64();
                        dgamma[j] += gv * hrow[j].as_f64();
                        dbeta[j] += gv;
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx = Vec::with_capacity(n * d);
                    if *train {
                        // Σ dxhat = γ Σ g ; Σ dxhat·xhat = γ Σ g·xhat
                        let nf = n as f64;
                        for (grow, hrow) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                let gj = gam[j].as_f64();
                                let dxhat = grow[j].as_f64() * gj;
                                let v = inv_std[j] / nf
                                    * (nf * dxhat - gj * dbeta[j] - hrow[j].as_f64() * gj * dgamma[j]);
                                dx.push(T::of_f64(v));
                            }
                        }
                    } else {
                        for grow in gd.chunks_exact(d) {
                            for j in 0..d {
                                dx.push(T::of_f64(grow[j].as_f64() * gam[j].as_f64() * inv_std[j]));
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![n, d], dx)?);
                }
                let to_t = |v: Vec<f64>| Tensor::vector(v.into_iter().map(T::of_f64).collect());
                self.accumulate(grads, *gamma, to_t(dgamma));
                self.accumulate(grads, *beta, to_t(dbeta));
            }
            Op::Splice { x, offsets, segs } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let k = offsets.len();
                let mut dx = vec![T::zero(); xv.len()];
                for (row, grow) in gd.chunks_exact(d * k).enumerate() {
                    for (tap, &o) in offsets.iter().enumerate() {
                        let src = segs.clamped(row, o);
                        let dst = &mut dx[src * d..(src + 1) * d];
                        for (a, b) in dst.iter_mut().zip(&grow[tap * d..(tap + 1) * d]) {
                            *a = *a + *b;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::PhoneLookup { w, rows, taps } => {
                let wv = self.value(*w);
                let h = wv.cols();
                let mut dw = vec![T::zero(); wv.len()];
                for (grow, idx) in gd.chunks_exact(h).zip(rows.chunks_exact(*taps)) {
                    for &r in idx {
                        let dst = &mut dw[r as usize * h..(r as usize + 1) * h];
                        for (a, b) in dst.iter_mut().zip(grow) {
                            *a = *a + *b;
                        }
                    }
                }
                self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
            }
            Op::ExpandRows { x, segs } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = vec![T::zero(); xv.len()];
                for (grow, &o) in gd.chunks_exact(d).zip(segs.owners()) {
                    let dst = &mut dx[o as usize * d..(o as usize + 1) * d];
                    for (a, b) in dst.iter_mut().zip(grow) {
                        *a = *a + *b;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::StatsPool { x, segs, mean, std } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = vec![T::zero(); xv.len()];
                for seg in 0..segs.count() {
                    let range = segs.range(seg);
                    let n = range.len() as f64;
                    let gm = &gd[seg * 2 * d..seg * 2 * d + d];
                    let gs = &gd[seg * 2 * d + d..(seg + 1) * 2 * d];
                    let mu = &mean[seg * d..(seg + 1) * d];
                    let sd = &std[seg * d..(seg + 1) * d];
                    for row in range {
                        for j in 0..d {
                            let c = xv.data()[row * d + j].as_f64() - mu[j];
                            let v = gm[j].as_f64() / n + gs[j].as_f64() * c / (n * sd[j]);
                            dx[row * d + j] = T::of_f64(v);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = self.value(*logits).cols();
                let n = labels.len();
                let scale = gd[0].as_f64() / n as f64;
                let mut dl = Vec::with_capacity(n * k);
                for (row, &label) in probs.chunks_exact(k).zip(labels) {
                    for (j, &p) in row.iter().enumerate() {
                        let t = if j == label { 1.0 } else { 0.0 };
                        dl.push(T::of_f64((p - t) * scale));
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(vec![n, k], dl)?);
            }
            Op::SegmentMse { pred, target, segs } => {
                let pv = self.value(*pred);
                let f = pv.cols();
                let s = segs.count() as f64;
                let mut dp = vec![T::zero(); pv.len()];
                for seg in 0..segs.count() {
                    let range = segs.range(seg);
                    let scale = 2.0 * gd[0].as_f64() / (s * range.len() as f64);
                    for i in range.start * f..range.end * f {
                        dp[i] = T::of_f64((pv.data()[i].as_f64() - target[i].as_f64()) * scale);
                    }
                }
                self.accumulate(grads, *pred, Tensor::new(pv.shape().to_vec(), dp)?);
            }
            Op::Sum { x } => {
                let xv = self.value(*x);
                let dx = vec![gd[0]; xv.len()];
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    let shape = self.value(v).shape().to_vec();
                    self.accumulate(grads, v, Tensor::new(shape, vec![T::of_f64(gd[0].as_f64() * w)])?);
                }
            }
        }
        Ok(())
    }
}

fn column_sums<T: Real>(data: &[T], cols: usize) -> Vec<T> {
    let mut acc = vec![0.0f64; cols];
    for row in data.chunks_exact(cols) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v.as_f64();
        }
    }
    acc.into_iter().map(T::of_f64).collect()
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter leaf registered through [`Tape::param`].
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<T>>)> + '_ {
        self.params.iter().map(|&(id, v)| (id, self.grads[v.0].as_ref()))
    }
}
