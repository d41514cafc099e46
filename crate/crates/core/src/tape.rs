//! Reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation executed on it in program order. Values
//! live on the tape and are addressed by [`Var`] handles. [`Tape::backward`]
//! replays the record in reverse exactly once; afterwards the tape is
//! consumed and only leaf gradients can be read.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};
use crate::transforms::TransformSpec;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, stride: usize, pad: usize },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Transform { input: Var, spec: Arc<TransformSpec>, channel: usize },
    Generate { input: Var, spec: Arc<TransformSpec> },
    Normalize { input: Var, eps: T, centered: Vec<T>, norms: Vec<T> },
    Concat(Vec<Var>),
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Upsample2(Var),
    GlobalAvgPool(Var),
    ChannelBias { input: Var, bias: Var },
    CrossEntropy { logits: Var, labels: Arc<[usize]>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Recording,
    Consumed,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    state: State,
    track_kinks: bool,
    kink_hash: u64,
    replayed: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            state: State::Recording,
            track_kinks: false,
            kink_hash: FNV_OFFSET,
            replayed: 0,
        }
    }

    /// Records a fingerprint of every ReLU sign pattern and max-pool winner,
    /// so finite-difference checks can tell when a stencil crosses a kink.
    pub fn with_kink_tracking(mut self) -> Self {
        self.track_kinks = true;
        self
    }

    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    fn mix_kink(&mut self, word: u64) {
        for b in word.to_le_bytes() {
            self.kink_hash = (self.kink_hash ^ b as u64).wrapping_mul(FNV_PRIME);
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of operations visited by the last backward pass.
    pub fn ops_replayed(&self) -> usize {
        self.replayed
    }

    fn ensure_recording(&self) -> Result<()> {
        if self.state == State::Consumed {
            return Err(Error::State(
                "computation record already consumed by backward; re-run the forward pass".into(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; it receives a gradient when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Records a copy of `tensor` as a differentiable leaf.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        let mut t = tensor.clone();
        t.clear_grad();
        self.leaf(t.with_requires_grad(true))
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grad(v)?;
        Tensor::from_vec(self.shape(v), g.to_vec()).ok()
    }

    /// Copies the gradient of `v` into `target.grad`.
    pub fn write_grad(&self, v: Var, target: &mut Tensor<T>) -> Result<()> {
        let g = self
            .grad(v)
            .ok_or_else(|| Error::State(format!("no gradient recorded for node {}", v.0)))?;
        target.set_grad(g.to_vec())
    }

    // ------------------------------------------------------------------
    // Operations
    // ------------------------------------------------------------------

    /// 2-D cross-correlation without bias. `weight` is `Co×Ci×K×K`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        self.ensure_recording()?;
        let out = conv2d_forward(self.value(input), self.value(weight), stride, pad)?;
        let ng = self.needs(input) || self.needs(weight);
        Ok(self.push(out, Op::Conv2d { input, weight, stride, pad }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.ensure_recording()?;
        let out = self.value(x).map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() });
        if self.track_kinks {
            let words: Vec<u64> = self
                .value(x)
                .data()
                .chunks(64)
                .map(|c| c.iter().enumerate().fold(0u64, |acc, (i, &v)| acc | (((v > T::zero()) as u64) << i)))
                .collect();
            for w in words {
                self.mix_kink(w);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::Relu(x), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_recording()?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!("add: {} vs {}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_recording()?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!("mul: {} vs {}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.ensure_recording()?;
        let out = self.value(x).map(|v| v * factor);
        let ng = self.needs(x);
        Ok(self.push(out, Op::Scale(x, factor), ng))
    }

    /// Sum of all elements as a `1×1×1×1` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.ensure_recording()?;
        let s = self.value(x).sum();
        let out = Tensor::new([1, 1, 1, 1], vec![s])?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Sum(x), ng))
    }

    /// Applies one transform channel elementwise; hyperparameters get no gradient.
    pub fn transform(&mut self, x: Var, spec: Arc<TransformSpec>, channel: usize) -> Result<Var> {
        self.ensure_recording()?;
        let out = crate::transforms::eval_transform(&spec, channel, self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Transform { input: x, spec, channel }, ng))
    }

    /// Generates `spec.len()` maps from the `C_s` seed maps of `x`: output
    /// channel `j` is transform `j` applied to seed channel `j mod C_s`.
    pub fn generate(&mut self, x: Var, spec: Arc<TransformSpec>) -> Result<Var> {
        self.ensure_recording()?;
        let xin = self.value(x);
        let s = xin.shape();
        let (cs, hw, cg) = (s.c(), s.hw(), spec.len());
        let mut data = Vec::with_capacity(s.n() * cg * hw);
        for n in 0..s.n() {
            for j in 0..cg {
                let src = &xin.data()[s.offset(n, j % cs, 0, 0)..][..hw];
                data.extend(src.iter().map(|&v| spec.eval(j, v)));
            }
        }
        let out = Tensor::new([s.n(), cg, s.h(), s.w()], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Generate { input: x, spec }, ng))
    }

    /// Per-sample, per-channel map normalisation:
    /// `(y − mean) / (‖y − mean‖₂ + eps)` over the spatial extent.
    pub fn normalize_maps(&mut self, x: Var, eps: T) -> Result<Var> {
        self.ensure_recording()?;
        let xin = self.value(x);
        let s = xin.shape();
        let hw = s.hw();
        let inv_n = T::one() / T::from_f64_lossy(hw as f64);
        let mut centered = Vec::with_capacity(xin.len());
        let mut norms = Vec::with_capacity(s.n() * s.c());
        let mut out = Vec::with_capacity(xin.len());
        for map in xin.data().chunks(hw) {
            let mean = map.iter().copied().sum::<T>() * inv_n;
            let start = centered.len();
            centered.extend(map.iter().map(|&v| v - mean));
            let c = &centered[start..];
            let norm = c.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = norm + eps;
            out.extend(c.iter().map(|&v| v / denom));
            norms.push(norm);
        }
        let out = Tensor::from_vec(s, out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Normalize { input: x, eps, centered, norms }, ng))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.ensure_recording()?;
        let first = *parts.first().ok_or_else(|| Error::arg("concat of zero tensors"))?;
        let s0 = self.shape(first);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.n() != s0.n() || s.h() != s0.h() || s.w() != s0.w() {
                return Err(Error::dim(format!("concat: {s} vs {s0}")));
            }
            channels += s.c();
        }
        let hw = s0.hw();
        let mut data = Vec::with_capacity(s0.n() * channels * hw);
        for n in 0..s0.n() {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape().c();
                data.extend_from_slice(&t.data()[n * c * hw..(n + 1) * c * hw]);
            }
        }
        let out = Tensor::new([s0.n(), channels, s0.h(), s0.w()], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    /// 2×2 max pooling with stride 2 (trailing odd rows/columns dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        self.ensure_recording()?;
        let xin = self.value(x);
        let s = xin.shape();
        if s.h() < 2 || s.w() < 2 {
            return Err(Error::dim(format!("max-pool needs at least 2x2 maps, got {s}")));
        }
        let (ho, wo) = (s.h() / 2, s.w() / 2);
        let mut data = Vec::with_capacity(s.n() * s.c() * ho * wo);
        let mut argmax = Vec::with_capacity(data.capacity());
        for n in 0..s.n() {
            for c in 0..s.c() {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut best = s.offset(n, c, 2 * i, 2 * j);
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let o = s.offset(n, c, 2 * i + di, 2 * j + dj);
                            if xin.data()[o] > xin.data()[best] || xin.data()[o].is_nan() {
                                best = o;
                            }
                        }
                        argmax.push(best);
                        data.push(xin.data()[best]);
                    }
                }
            }
        }
        if self.track_kinks {
            let words: Vec<u64> = argmax.iter().map(|&a| a as u64).collect();
            for w in words {
                self.mix_kink(w);
            }
        }
        let out = Tensor::new([s.n(), s.c(), ho, wo], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::MaxPool2 { input: x, argmax }, ng))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.ensure_recording()?;
        let xin = self.value(x);
        let s = xin.shape();
        let (ho, wo) = (2 * s.h(), 2 * s.w());
        let mut data = Vec::with_capacity(s.numel() * 4);
        for map in xin.data().chunks(s.hw()) {
            for i in 0..ho {
                for j in 0..wo {
                    data.push(map[(i / 2) * s.w() + j / 2]);
                }
            }
        }
        let out = Tensor::new([s.n(), s.c(), ho, wo], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Upsample2(x), ng))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.ensure_recording()?;
        let xin = self.value(x);
        let s = xin.shape();
        let inv = T::one() / T::from_f64_lossy(s.hw() as f64);
        let data = xin.data().chunks(s.hw()).map(|m| m.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new([s.n(), s.c(), 1, 1], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::GlobalAvgPool(x), ng))
    }

    /// Adds `bias[c]` to every element of channel `c`; `bias` holds `C` values.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.ensure_recording()?;
        let (xin, b) = (self.value(x), self.value(bias));
        let s = xin.shape();
        if b.len() != s.c() {
            return Err(Error::dim(format!("bias of {} values for {} channels", b.len(), s.c())));
        }
        let mut data = xin.data().to_vec();
        for (k, map) in data.chunks_mut(s.hw()).enumerate() {
            let bc = b.data()[k % s.c()];
            map.iter_mut().for_each(|v| *v += bc);
        }
        let out = Tensor::from_vec(s, data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::ChannelBias { input: x, bias }, ng))
    }

    /// Mean softmax cross-entropy over every `(n, h, w)` position, classes
    /// along the channel axis. `labels` is in `N×H×W` order.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<[usize]>) -> Result<Var> {
        self.ensure_recording()?;
        let z = self.value(logits);
        let s = z.shape();
        let (classes, hw) = (s.c(), s.hw());
        if labels.len() != s.n() * hw {
            return Err(Error::dim(format!(
                "{} labels for logits of shape {s}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::arg(format!("label {bad} out of range for {classes} classes")));
        }
        let mut probs = vec![T::zero(); z.len()];
        let mut total = 0.0f64;
        for n in 0..s.n() {
            for p in 0..hw {
                let at = |c: usize| s.offset(n, c, 0, 0) + p;
                let max = (0..classes).map(|c| z.data()[at(c)]).fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                for c in 0..classes {
                    let e = (z.data()[at(c)] - max).exp();
                    probs[at(c)] = e;
                    denom += e;
                }
                for c in 0..classes {
                    probs[at(c)] /= denom;
                }
                let label = labels[n * hw + p];
                let p = probs[at(label)].as_f64();
                total -= if p.is_nan() { p } else { p.max(1e-300).ln() };
            }
        }
        let count = (s.n() * hw) as f64;
        let out = Tensor::new([1, 1, 1, 1], vec![T::from_f64_lossy(total / count)])?;
        let ng = self.needs(logits);
        Ok(self.push(out, Op::CrossEntropy { logits, labels, probs }, ng))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Propagates `∂loss/∂·` to every leaf that requires a gradient.
    ///
    /// Consumes the record: a second call fails with [`Error::State`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.ensure_recording()?;
        if self.value(loss).len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {}",
                self.shape(loss)
            )));
        }
        self.state = State::Consumed;
        self.replayed = 0;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.replayed += 1;
            self.backprop_node(i, &g, &mut grads)?;
        }

        // Keep leaf gradients only; unreachable differentiable leaves get zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                if grads[i].is_none() {
                    grads[i] = Some(vec![T::zero(); node.value.len()]);
                }
            } else {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, stride, pad } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (gx, gw) = conv2d_backward(
                    x,
                    w,
                    g,
                    node.value.shape(),
                    *stride,
                    *pad,
                    self.needs(*input),
                    self.needs(*weight),
                );
                if let Some(gx) = gx {
                    accumulate(grads, *input, &gx);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *weight, &gw);
                }
            }
            Op::Relu(x) => {
                let gx: Vec<T> = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let ga: Vec<T> = g.iter().zip(vb).map(|(&gv, &y)| gv * y).collect();
                    accumulate(grads, *a, &ga);
                }
                if self.needs(*b) {
                    let gb: Vec<T> = g.iter().zip(va).map(|(&gv, &x)| gv * x).collect();
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Scale(x, f) => {
                let gx: Vec<T> = g.iter().map(|&gv| gv * *f).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.value(*x).len()];
                accumulate(grads, *x, &gx);
            }
            Op::Transform { input, spec, channel } => {
                let gx: Vec<T> = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| gv * spec.eval_with_derivative(*channel, v).1)
                    .collect();
                accumulate(grads, *input, &gx);
            }
            Op::Generate { input, spec } => {
                let x = self.value(*input);
                let s = x.shape();
                let (cs, hw, cg) = (s.c(), s.hw(), spec.len());
                let mut gx = vec![T::zero(); x.len()];
                for n in 0..s.n() {
                    for j in 0..cg {
                        let src = s.offset(n, j % cs, 0, 0);
                        let go = &g[(n * cg + j) * hw..][..hw];
                        for p in 0..hw {
                            gx[src + p] += go[p] * spec.eval_with_derivative(j, x.data()[src + p]).1;
                        }
                    }
                }
                accumulate(grads, *input, &gx);
            }
            Op::Normalize { input, eps, centered, norms } => {
                let hw = node.value.shape().hw();
                let inv_n = T::one() / T::from_f64_lossy(hw as f64);
                let mut gx = Vec::with_capacity(g.len());
                for (m, (gm, cm)) in g.chunks(hw).zip(centered.chunks(hw)).enumerate() {
                    let norm = norms[m];
                    let d = norm + *eps;
                    let gmean = gm.iter().copied().sum::<T>() * inv_n;
                    let gc: T = gm.iter().zip(cm).map(|(&a, &b)| a * b).sum();
                    let k = if norm > T::zero() { gc / (d * d * norm) } else { T::zero() };
                    gx.extend(gm.iter().zip(cm).map(|(&gv, &cv)| (gv - gmean) / d - cv * k));
                }
                accumulate(grads, *input, &gx);
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let (hw, total_c) = (s.hw(), s.c());
                let mut c_off = 0;
                for &p in parts {
                    let c = self.shape(p).c();
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(s.n() * c * hw);
                        for n in 0..s.n() {
                            let start = (n * total_c + c_off) * hw;
                            gp.extend_from_slice(&g[start..start + c * hw]);
                        }
                        accumulate(grads, p, &gp);
                    }
                    c_off += c;
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gx = vec![T::zero(); self.value(*input).len()];
                for (&a, &gv) in argmax.iter().zip(g) {
                    gx[a] += gv;
                }
                accumulate(grads, *input, &gx);
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let (ho, wo) = (2 * s.h(), 2 * s.w());
                let mut gx = vec![T::zero(); s.numel()];
                for (m, gm) in g.chunks(ho * wo).enumerate() {
                    let base = m * s.hw();
                    for i in 0..ho {
                        for j in 0..wo {
                            gx[base + (i / 2) * s.w() + j / 2] += gm[i * wo + j];
                        }
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let inv = T::one() / T::from_f64_lossy(s.hw() as f64);
                let mut gx = Vec::with_capacity(s.numel());
                for &gv in g {
                    gx.extend(std::iter::repeat_n(gv * inv, s.hw()));
                }
                accumulate(grads, *x, &gx);
            }
            Op::ChannelBias { input, bias } => {
                if self.needs(*input) {
                    accumulate(grads, *input, g);
                }
                if self.needs(*bias) {
                    let s = node.value.shape();
                    let mut gb = vec![T::zero(); s.c()];
                    for (k, gm) in g.chunks(s.hw()).enumerate() {
                        gb[k % s.c()] += gm.iter().copied().sum::<T>();
                    }
                    accumulate(grads, *bias, &gb);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let s = self.shape(*logits);
                let hw = s.hw();
                let scale = g[0] / T::from_f64_lossy((s.n() * hw) as f64);
                let mut gz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for n in 0..s.n() {
                    for p in 0..hw {
                        let l = labels[n * hw + p];
                        gz[s.offset(n, l, 0, 0) + p] -= scale;
                    }
                }
                accumulate(grads, *logits, &gz);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, &x)| *e += x),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn conv_geometry<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<(usize, usize, usize)> {
    let (xs, ws) = (x.shape(), w.shape());
    if stride == 0 {
        return Err(Error::arg("convolution stride must be positive"));
    }
    if ws.h() != ws.w() {
        return Err(Error::dim(format!("convolution kernels must be square, got {ws}")));
    }
    if xs.c() != ws.c() {
        return Err(Error::dim(format!(
            "conv2d: input has {} channels but weights expect {} (input {xs}, weights {ws})",
            xs.c(),
            ws.c()
        )));
    }
    let k = ws.h();
    let ho = conv_out_extent(xs.h(), k, stride, pad)
        .ok_or_else(|| Error::dim(format!("conv2d: kernel {k} larger than padded input {xs}")))?;
    let wo = conv_out_extent(xs.w(), k, stride, pad)
        .ok_or_else(|| Error::dim(format!("conv2d: kernel {k} larger than padded input {xs}")))?;
    Ok((k, ho, wo))
}

/// Gathers zero-padded patches of sample `n` into a `(Ci·K·K) × (Ho·Wo)` matrix.
fn im2col<T: Real>(x: &Tensor<T>, n: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, cols: &mut [T]) {
    let s = x.shape();
    let (h, w) = (s.h() as isize, s.w() as isize);
    let how = ho * wo;
    for c in 0..s.c() {
        let map = &x.data()[s.offset(n, c, 0, 0)..][..s.hw()];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((c * k + ki) * k + kj) * how..][..how];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &map[(ii as usize) * s.w()..][..s.w()];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        *d = if jj < 0 || jj >= w { T::zero() } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Scatters a patch matrix back into sample `n` of a gradient buffer.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], s: Shape, n: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, gx: &mut [T]) {
    let (h, w) = (s.h() as isize, s.w() as isize);
    let how = ho * wo;
    for c in 0..s.c() {
        let base = s.offset(n, c, 0, 0);
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((c * k + ki) * k + kj) * how..][..how];
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && jj < w {
                            gx[base + ii as usize * s.w() + jj as usize] += row[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

/// Forward convolution via patch gathering and a matrix product per sample.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (k, ho, wo) = conv_geometry(x, w, stride, pad)?;
    let (xs, ws) = (x.shape(), w.shape());
    let (co, ckk, how) = (ws.n(), xs.c() * k * k, ho * wo);
    let mut out = vec![T::zero(); xs.n() * co * how];
    let pointwise = is_pointwise(k, stride, pad);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * how] };
    for n in 0..xs.n() {
        let b: &[T] = if pointwise {
            &x.data()[n * ckk * how..(n + 1) * ckk * how]
        } else {
            im2col(x, n, k, stride, pad, ho, wo, &mut cols);
            &cols
        };
        let c = &mut out[n * co * how..(n + 1) * co * how];
        T::gemm(co, ckk, how, w.data(), ckk as isize, 1, b, how as isize, 1, T::zero(), c, how as isize, 1);
    }
    Tensor::new([xs.n(), co, ho, wo], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &[T],
    out_shape: Shape,
    stride: usize,
    pad: usize,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h();
    let (ho, wo) = (out_shape.h(), out_shape.w());
    let (co, ckk, how) = (ws.n(), xs.c() * k * k, ho * wo);
    let pointwise = is_pointwise(k, stride, pad);
    let mut gx = want_x.then(|| vec![T::zero(); xs.numel()]);
    let mut gw = want_w.then(|| vec![T::zero(); ws.numel()]);
    let mut cols = vec![T::zero(); ckk * how];
    for n in 0..xs.n() {
        let gn = &g[n * co * how..(n + 1) * co * how];
        if let Some(gw) = gw.as_mut() {
            let b: &[T] = if pointwise {
                &x.data()[n * ckk * how..(n + 1) * ckk * how]
            } else {
                im2col(x, n, k, stride, pad, ho, wo, &mut cols);
                &cols
            };
            // gW += gOut · colsᵀ
            T::gemm(co, how, ckk, gn, how as isize, 1, b, 1, how as isize, T::one(), gw, ckk as isize, 1);
        }
        if let Some(gx) = gx.as_mut() {
            if pointwise {
                let dst = &mut gx[n * ckk * how..(n + 1) * ckk * how];
                T::gemm(ckk, co, how, w.data(), 1, ckk as isize, gn, how as isize, 1, T::one(), dst, how as isize, 1);
            } else {
                // gCols = Wᵀ · gOut
                T::gemm(ckk, co, how, w.data(), 1, ckk as isize, gn, how as isize, 1, T::zero(), &mut cols, how as isize, 1);
                col2im(&cols, xs, n, k, stride, pad, ho, wo, gx);
            }
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: [usize; 4], v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(dims, v).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t([1, 1, 3, 3], vec![2.0; 9]));
        let w = tape.constant(t([1, 1, 1, 1], vec![1.0]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0; 9]);
    }

    #[test]
    fn conv_full_patch_dot_product() {
        let mut tape = Tape::new();
        let x = tape.constant(t([1, 1, 3, 3], vec![1.0; 9]));
        let w = tape.constant(t([1, 1, 3, 3], vec![1.0; 9]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y).0, [1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_same_padding_shape() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(Shape::new(2, 3, 8, 8).unwrap()));
        let w = tape.constant(Tensor::zeros(Shape::new(16, 3, 3, 3).unwrap()));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(tape.shape(y).0, [2, 16, 8, 8]);
    }

    #[test]
    fn conv_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 3, 4, 4).unwrap()));
        let w = tape.constant(Tensor::zeros(Shape::new(2, 2, 3, 3).unwrap()));
        assert!(matches!(tape.conv2d(x, w, 1, 1), Err(Error::Dimension(_))));
        let w3 = tape.constant(Tensor::zeros(Shape::new(2, 3, 3, 3).unwrap()));
        assert!(matches!(tape.conv2d(x, w3, 0, 1), Err(Error::Argument(_))));
        let big = tape.constant(Tensor::zeros(Shape::new(2, 3, 7, 7).unwrap()));
        assert!(matches!(tape.conv2d(x, big, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).with_requires_grad(true));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t([1, 1, 1, 2], vec![-1.0, 2.0]).with_requires_grad(true));
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn linear_and_quadratic_gradients() {
        let mut tape = Tape::new();
        let w = tape.leaf(t([1, 1, 1, 2], vec![2.0, 3.0]).with_requires_grad(true));
        let x = tape.leaf(t([1, 1, 1, 2], vec![1.0, 1.0]).with_requires_grad(true));
        let p = tape.mul(w, x).unwrap();
        let l = tape.sum(p).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 3.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t([1, 1, 1, 2], vec![1.0, -2.0]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_contract() {
        let mut tape = Tape::new();
        let x = tape.leaf(t([1, 1, 1, 2], vec![1.0, 2.0]).with_requires_grad(true));
        let unused = tape.leaf(t([1, 1, 1, 1], vec![5.0]).with_requires_grad(true));
        let y = tape.scale(x, 3.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Argument(_))));
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.ops_replayed(), 2);
        assert_eq!(tape.grad(unused).unwrap(), &[0.0]);
        assert!(matches!(tape.backward(l), Err(Error::State(_))));
        assert!(matches!(tape.relu(x), Err(Error::State(_))));
    }

    #[test]
    fn normalize_hand_case() {
        let mut tape = Tape::new();
        let x = tape.constant(t([1, 1, 1, 3], vec![1.0, 2.0, 3.0]));
        let y = tape.normalize_maps(x, 1e-5).unwrap();
        let v = tape.value(y).data();
        let want = 1.0 / (2f64.sqrt() + 1e-5);
        assert!((v[0] + want).abs() < 1e-15 && v[1] == 0.0 && (v[2] - want).abs() < 1e-15);

        let mut tape = Tape::new();
        let x = tape.constant(t([1, 1, 1, 3], vec![5.0; 3]));
        let y = tape.normalize_maps(x, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 3]);
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(t([1, 1, 4, 4], (0..16).map(|v| v as f64).collect()));
        let p = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0, 7.0, 13.0, 15.0]);
        let u = tape.upsample2(p).unwrap();
        assert_eq!(tape.shape(u).0, [1, 1, 4, 4]);
        assert_eq!(tape.value(u).at(0, 0, 1, 1), 5.0);
        assert_eq!(tape.value(u).at(0, 0, 3, 2), 15.0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::<f64>::zeros(Shape::new(2, 4, 1, 1).unwrap()).with_requires_grad(true));
        let l = tape.cross_entropy(z, vec![0usize, 3].into()).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
        tape.backward(l).unwrap();
        let g = tape.grad(z).unwrap();
        assert!((g[0] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((g[1] - 0.125).abs() < 1e-12);
    }
}
