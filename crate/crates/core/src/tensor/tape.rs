use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::ops::{self, ConvSpec};
use super::{Shape, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: Var, b: Var, broadcast: bool },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var, broadcast: bool },
    Scale { a: Var, k: f64 },
    Sigmoid { a: Var },
    Relu { a: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Affine { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Resize { x: Var },
    GlobalAvgPool { x: Var },
    Concat { parts: Vec<Var> },
    SliceChannels { x: Var, start: usize },
    InnerScores { a: Var, b: Var },
    SoftmaxRows { a: Var },
    Mix { s: Var, f: Var },
    Sum { a: Var },
    Mean { a: Var },
    Wbce { p: Var, target: Tensor, alpha: Vec<f64>, lo: f64, hi: f64 },
    Dice { p: Var, target: Tensor, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode normalization, used by the
/// caller to update running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

/// Define-by-run gradient tape. Nodes are appended in evaluation order, so
/// the node list is always topologically sorted.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    keyed: BTreeMap<usize, Var>,
    consumed: bool,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero when `v` was not reached.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn bias_shape_ok(a: Shape, b: Shape) -> bool {
    b == Shape::new(1, a.c, 1, 1)
}

/// Sum over `(n, h, w)` per channel into a `(1, c, 1, 1)` tensor.
fn reduce_to_channels(t: &Tensor) -> Tensor {
    let s = t.shape();
    let mut out = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    for (i, plane) in t.data().chunks(s.plane()).enumerate() {
        out.data_mut()[i % s.c] += plane.iter().sum::<f64>();
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf registered under an external key (e.g. a parameter id). The leaf
    /// is created on first request; later requests return the same node.
    pub fn keyed_leaf(
        &mut self,
        key: usize,
        requires_grad: bool,
        make: impl FnOnce() -> Tensor,
    ) -> Var {
        if let Some(&v) = self.keyed.get(&key) {
            return v;
        }
        let v = self.leaf(make(), requires_grad);
        self.keyed.insert(key, v);
        v
    }

    /// All keyed leaves in key order.
    pub fn keyed_leaves(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.keyed.iter().map(|(&k, &v)| (k, v))
    }

    fn binary_check(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(false)
        } else if bias_shape_ok(sa, sb) {
            Ok(true)
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, broadcast: bool, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        if !broadcast {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::from_vec(ta.shape(), data).expect("elementwise length");
        }
        let s = ta.shape();
        let mut out = ta.clone();
        for (i, plane) in out.data_mut().chunks_mut(s.plane()).enumerate() {
            let bv = tb.data()[i % s.c];
            plane.iter_mut().for_each(|v| *v = f(*v, bv));
        }
        out
    }

    /// Elementwise sum; `b` may also be a `(1, c, 1, 1)` per-channel bias.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.binary_check("add", a, b)?;
        let value = self.zip_broadcast(a, b, broadcast, |x, y| x + y);
        Ok(self.push(value, Op::Add { a, b, broadcast }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("sub", sa, sb));
        }
        let value = self.zip_broadcast(a, b, false, |x, y| x - y);
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    /// Elementwise product; `b` may also be a `(1, c, 1, 1)` per-channel scale.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.binary_check("mul", a, b)?;
        let value = self.zip_broadcast(a, b, broadcast, |x, y| x * y);
        Ok(self.push(value, Op::Mul { a, b, broadcast }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|v| v * k);
        self.push(value, Op::Scale { a, k }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(ops::sigmoid);
        self.push(value, Op::Sigmoid { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu { a }, &[a])
    }

    /// Cross-correlation with zero padding. `w` is `(c_out, c_in, k, k)`,
    /// `b` is `(1, c_out, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let value = ops::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, spec }, &inputs))
    }

    /// Training-mode batch normalization using the statistics of `x` itself.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let s = self.shape(x);
        for p in [gamma, beta] {
            if !bias_shape_ok(s, self.shape(p)) {
                return Err(Error::shape("batch_norm", s, self.shape(p)));
            }
        }
        let count = s.n * s.plane();
        if count < 2 {
            return Err(Error::config(format!(
                "batch normalization over {s} has a single value per channel; use batch >= 2 or disable normalization"
            )));
        }
        let (mean, var) = ops::channel_moments(self.value(x));
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = self.value(x).clone();
        for (i, plane) in xhat.data_mut().chunks_mut(s.plane()).enumerate() {
            let c = i % s.c;
            plane.iter_mut().for_each(|v| *v = (*v - mean[c]) * inv_std[c]);
        }
        let (g, bt) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut y = xhat.clone();
        for (i, plane) in y.data_mut().chunks_mut(s.plane()).enumerate() {
            let c = i % s.c;
            plane.iter_mut().for_each(|v| *v = *v * g[c] + bt[c]);
        }
        let unbias = count as f64 / (count - 1) as f64;
        let stats = BatchStats {
            mean,
            var: var.iter().map(|v| v * unbias).collect(),
        };
        let out = self.push(y, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]);
        Ok((out, stats))
    }

    /// Evaluation-mode normalization with fixed statistics:
    /// `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x);
        for p in [gamma, beta] {
            if !bias_shape_ok(s, self.shape(p)) {
                return Err(Error::shape("channel_affine", s, self.shape(p)));
            }
        }
        if mean.len() != s.c || var.len() != s.c {
            return Err(Error::config("running statistics length differs from channel count"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut y = self.value(x).clone();
        for (i, plane) in y.data_mut().chunks_mut(s.plane()).enumerate() {
            let c = i % s.c;
            plane
                .iter_mut()
                .for_each(|v| *v = (*v - mean[c]) * inv_std[c] * g[c] + bt[c]);
        }
        let op = Op::Affine {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            inv_std,
        };
        Ok(self.push(y, op, &[x, gamma, beta]))
    }

    /// Bilinear resampling with half-pixel centers and edge clamping.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::config("resize target must be at least 1x1"));
        }
        let value = ops::resize_forward(self.value(x), out_h, out_w);
        Ok(self.push(value, Op::Resize { x }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let area = s.plane() as f64;
        let data = self
            .value(x)
            .data()
            .chunks(s.plane())
            .map(|p| p.iter().sum::<f64>() / area)
            .collect();
        let value = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pool length");
        self.push(value, Op::GlobalAvgPool { x }, &[x])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(&v) => self.shape(v),
            None => return Err(Error::config("concat of zero tensors")),
        };
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape("concat_channels", first, s));
            }
            channels += s.c;
        }
        let out_shape = Shape::new(first.n, channels, first.h, first.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for &p in parts {
                let t = self.value(p);
                let item = t.shape().c * first.plane();
                data.extend_from_slice(&t.data()[n * item..(n + 1) * item]);
            }
        }
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, parts))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if len == 0 || start + len > s.c {
            return Err(Error::config(format!(
                "channel slice {start}..{} out of range for {s}",
                start + len
            )));
        }
        let out_shape = Shape::new(s.n, len, s.h, s.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        let src = self.value(x).data();
        for n in 0..s.n {
            let off = (n * s.c + start) * s.plane();
            data.extend_from_slice(&src[off..off + len * s.plane()]);
        }
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(value, Op::SliceChannels { x, start }, &[x]))
    }

    /// Pairwise inner products between spatial positions:
    /// `out[n, 0, p, q] = sum_c a[n, c, p] * b[n, c, q]`, with `N = h * w`.
    pub fn inner_scores(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("inner_scores", sa, sb));
        }
        let (c, np) = (sa.c, sa.plane());
        let mut out = Tensor::zeros(Shape::new(sa.n, 1, np, np));
        for i in 0..sa.n {
            let ai = &self.value(a).data()[i * c * np..(i + 1) * c * np];
            let bi = &self.value(b).data()[i * c * np..(i + 1) * c * np];
            let oi = &mut out.data_mut()[i * np * np..(i + 1) * np * np];
            ops::gemm(np, c, np, ai, (1, np), bi, (np, 1), 0.0, oi);
        }
        Ok(self.push(out, Op::InnerScores { a, b }, &[a, b]))
    }

    /// Softmax along the last axis of every `(n, c, row)`.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(s.w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(value, Op::SoftmaxRows { a }, &[a])
    }

    /// Position mixing: `out[n, c, p] = sum_q s[n, 0, p, q] * f[n, c, q]`.
    pub fn mix_positions(&mut self, s: Var, f: Var) -> Result<Var> {
        let (ss, sf) = (self.shape(s), self.shape(f));
        let np = sf.plane();
        if ss != Shape::new(sf.n, 1, np, np) {
            return Err(Error::shape("mix_positions", ss, sf));
        }
        let c = sf.c;
        let mut out = Tensor::zeros(sf);
        for i in 0..sf.n {
            let si = &self.value(s).data()[i * np * np..(i + 1) * np * np];
            let fi = &self.value(f).data()[i * c * np..(i + 1) * c * np];
            let oi = &mut out.data_mut()[i * c * np..(i + 1) * c * np];
            ops::gemm(c, np, np, fi, (np, 1), si, (1, np), 0.0, oi);
        }
        Ok(self.push(out, Op::Mix { s, f }, &[s, f]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.shape().numel() as f64);
        self.push(value, Op::Mean { a }, &[a])
    }

    /// Per-image class-weighted binary cross-entropy, shape `(n, 1, 1, 1)`.
    /// `alpha[i]` weights the positive pixels of image `i`; probabilities are
    /// clamped to `[lo, hi]` before the logarithm.
    pub fn weighted_bce(
        &mut self,
        p: Var,
        target: &Tensor,
        alpha: &[f64],
        (lo, hi): (f64, f64),
    ) -> Result<Var> {
        let s = self.shape(p);
        if target.shape() != s || s.c != 1 {
            return Err(Error::shape("weighted_bce", s, target.shape()));
        }
        if alpha.len() != s.n {
            return Err(Error::config("one class weight per image required"));
        }
        let np = s.plane();
        let pv = self.value(p).data();
        let data = (0..s.n)
            .map(|i| {
                let mut acc = 0.0;
                let range = i * np..(i + 1) * np;
                for (&pj, &yj) in pv[range.clone()].iter().zip(&target.data()[range]) {
                    let q = pj.clamp(lo, hi);
                    acc += if yj >= 0.5 {
                        alpha[i] * q.ln()
                    } else {
                        (1.0 - alpha[i]) * (1.0 - q).ln()
                    };
                }
                -acc / np as f64
            })
            .collect();
        let value = Tensor::from_vec(Shape::new(s.n, 1, 1, 1), data)?;
        let op = Op::Wbce {
            p,
            target: target.clone(),
            alpha: alpha.to_vec(),
            lo,
            hi,
        };
        Ok(self.push(value, op, &[p]))
    }

    /// Per-image soft dice loss, shape `(n, 1, 1, 1)`:
    /// `1 - (2 sum(y p) + eps) / (sum(y^2) + sum(p^2) + eps)`.
    pub fn dice_loss(&mut self, p: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let s = self.shape(p);
        if target.shape() != s || s.c != 1 {
            return Err(Error::shape("dice_loss", s, target.shape()));
        }
        let np = s.plane();
        let pv = self.value(p).data();
        let data = (0..s.n)
            .map(|i| {
                let r = i * np..(i + 1) * np;
                let (inter, sy, sp) = dice_sums(&pv[r.clone()], &target.data()[r]);
                1.0 - (2.0 * inter + eps) / (sy + sp + eps)
            })
            .collect();
        let value = Tensor::from_vec(Shape::new(s.n, 1, 1, 1), data)?;
        let op = Op::Dice {
            p,
            target: target.clone(),
            eps,
        };
        Ok(self.push(value, op, &[p]))
    }

    /// Reverse-mode sweep from a scalar `loss`. The tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("backward called on a consumed tape".into()));
        }
        let ls = self.shape(loss);
        if ls != Shape::scalar() {
            return Err(Error::shape("backward", ls, Shape::scalar()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::State("loss does not depend on any differentiable leaf".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b, broadcast } => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if wants(*b) {
                    let gb = if *broadcast { reduce_to_channels(g) } else { g.clone() };
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], g.map(|v| -v));
                }
            }
            Op::Mul { a, b, broadcast } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let ga = if *broadcast {
                        let s = g.shape();
                        let mut out = g.clone();
                        for (i, plane) in out.data_mut().chunks_mut(s.plane()).enumerate() {
                            let bv = tb.data()[i % s.c];
                            plane.iter_mut().for_each(|v| *v *= bv);
                        }
                        out
                    } else {
                        zip(g, tb, |x, y| x * y)
                    };
                    accumulate(&mut grads[a.0], ga);
                }
                if wants(*b) {
                    let prod = zip(g, ta, |x, y| x * y);
                    let gb = if *broadcast { reduce_to_channels(&prod) } else { prod };
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Scale { a, k } => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.map(|v| v * k));
                }
            }
            Op::Sigmoid { a } => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], zip(g, &node.value, |d, y| d * y * (1.0 - y)));
                }
            }
            Op::Relu { a } => {
                if wants(*a) {
                    let ga = zip(g, self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 });
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let cg = ops::conv2d_backward(self.value(*x), self.value(*w), *spec, g, wants(*x))?;
                if let Some(dx) = cg.dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if wants(*w) {
                    accumulate(&mut grads[w.0], cg.dw);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        accumulate(&mut grads[b.0], cg.db);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let s = g.shape();
                let count = (s.n * s.plane()) as f64;
                let sum_g = reduce_to_channels(g);
                let sum_gx = reduce_to_channels(&zip(g, xhat, |a, b| a * b));
                if wants(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = g.clone();
                    let planes = dx.data_mut().chunks_mut(s.plane());
                    for (i, (plane, xh)) in planes.zip(xhat.data().chunks(s.plane())).enumerate() {
                        let c = i % s.c;
                        let k = gam[c] * inv_std[c] / count;
                        let (sg, sgx) = (sum_g.data()[c], sum_gx.data()[c]);
                        for (d, &xv) in plane.iter_mut().zip(xh) {
                            *d = k * (count * *d - sg - xv * sgx);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if wants(*gamma) {
                    accumulate(&mut grads[gamma.0], sum_gx);
                }
                if wants(*beta) {
                    accumulate(&mut grads[beta.0], sum_g);
                }
            }
            Op::Affine { x, gamma, beta, mean, inv_std } => {
                let s = g.shape();
                let gam = self.value(*gamma).data();
                if wants(*x) {
                    let mut dx = g.clone();
                    for (i, plane) in dx.data_mut().chunks_mut(s.plane()).enumerate() {
                        let c = i % s.c;
                        plane.iter_mut().for_each(|d| *d *= gam[c] * inv_std[c]);
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if wants(*gamma) {
                    let mut xn = self.value(*x).clone();
                    for (i, plane) in xn.data_mut().chunks_mut(s.plane()).enumerate() {
                        let c = i % s.c;
                        plane.iter_mut().for_each(|v| *v = (*v - mean[c]) * inv_std[c]);
                    }
                    accumulate(&mut grads[gamma.0], reduce_to_channels(&zip(g, &xn, |a, b| a * b)));
                }
                if wants(*beta) {
                    accumulate(&mut grads[beta.0], reduce_to_channels(g));
                }
            }
            Op::Resize { x } => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], ops::resize_backward(self.shape(*x), g));
                }
            }
            Op::GlobalAvgPool { x } => {
                if wants(*x) {
                    let s = self.shape(*x);
                    let area = s.plane() as f64;
                    let mut dx = Tensor::zeros(s);
                    for (plane, &gv) in dx.data_mut().chunks_mut(s.plane()).zip(g.data()) {
                        plane.fill(gv / area);
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Concat { parts } => {
                let s = g.shape();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    if wants(p) {
                        let mut data = Vec::with_capacity(ps.numel());
                        for n in 0..s.n {
                            let off = (n * s.c + offset) * s.plane();
                            data.extend_from_slice(&g.data()[off..off + ps.c * s.plane()]);
                        }
                        accumulate(&mut grads[p.0], Tensor::from_vec(ps, data)?);
                    }
                    offset += ps.c;
                }
            }
            Op::SliceChannels { x, start } => {
                if wants(*x) {
                    let s = self.shape(*x);
                    let len = g.shape().c * s.plane();
                    let mut dx = Tensor::zeros(s);
                    for n in 0..s.n {
                        let off = (n * s.c + start) * s.plane();
                        dx.data_mut()[off..off + len].copy_from_slice(&g.data()[n * len..(n + 1) * len]);
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::InnerScores { a, b } => {
                let s = self.shape(*a);
                let (c, np) = (s.c, s.plane());
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let mut da = Tensor::zeros(s);
                    for i in 0..s.n {
                        let gi = &g.data()[i * np * np..(i + 1) * np * np];
                        let bi = &tb.data()[i * c * np..(i + 1) * c * np];
                        let di = &mut da.data_mut()[i * c * np..(i + 1) * c * np];
                        ops::gemm(c, np, np, bi, (np, 1), gi, (1, np), 0.0, di);
                    }
                    accumulate(&mut grads[a.0], da);
                }
                if wants(*b) {
                    let mut db = Tensor::zeros(s);
                    for i in 0..s.n {
                        let gi = &g.data()[i * np * np..(i + 1) * np * np];
                        let ai = &ta.data()[i * c * np..(i + 1) * c * np];
                        let di = &mut db.data_mut()[i * c * np..(i + 1) * c * np];
                        ops::gemm(c, np, np, ai, (np, 1), gi, (np, 1), 0.0, di);
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::SoftmaxRows { a } => {
                if wants(*a) {
                    let w = g.shape().w;
                    let mut da = g.clone();
                    for (drow, yrow) in da.data_mut().chunks_mut(w).zip(node.value.data().chunks(w)) {
                        let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for (d, y) in drow.iter_mut().zip(yrow) {
                            *d = y * (*d - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
            }
            Op::Mix { s, f } => {
                let sf = self.shape(*f);
                let (c, np) = (sf.c, sf.plane());
                let (ts, tf) = (self.value(*s), self.value(*f));
                if wants(*f) {
                    let mut df = Tensor::zeros(sf);
                    for i in 0..sf.n {
                        let gi = &g.data()[i * c * np..(i + 1) * c * np];
                        let si = &ts.data()[i * np * np..(i + 1) * np * np];
                        let di = &mut df.data_mut()[i * c * np..(i + 1) * c * np];
                        ops::gemm(c, np, np, gi, (np, 1), si, (np, 1), 0.0, di);
                    }
                    accumulate(&mut grads[f.0], df);
                }
                if wants(*s) {
                    let mut ds = Tensor::zeros(self.shape(*s));
                    for i in 0..sf.n {
                        let gi = &g.data()[i * c * np..(i + 1) * c * np];
                        let fi = &tf.data()[i * c * np..(i + 1) * c * np];
                        let di = &mut ds.data_mut()[i * np * np..(i + 1) * np * np];
                        ops::gemm(np, c, np, gi, (1, np), fi, (np, 1), 0.0, di);
                    }
                    accumulate(&mut grads[s.0], ds);
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], Tensor::full(self.shape(*a), g.item()));
                }
            }
            Op::Mean { a } => {
                if wants(*a) {
                    let s = self.shape(*a);
                    accumulate(&mut grads[a.0], Tensor::full(s, g.item() / s.numel() as f64));
                }
            }
            Op::Wbce { p, target, alpha, lo, hi } => {
                if wants(*p) {
                    let s = self.shape(*p);
                    let np = s.plane();
                    let pv = self.value(*p).data();
                    let mut dp = Tensor::zeros(s);
                    for (j, d) in dp.data_mut().iter_mut().enumerate() {
                        let i = j / np;
                        let q = pv[j];
                        if q < *lo || q > *hi {
                            continue;
                        }
                        let scale = g.data()[i] / np as f64;
                        *d = if target.data()[j] >= 0.5 {
                            -scale * alpha[i] / q
                        } else {
                            scale * (1.0 - alpha[i]) / (1.0 - q)
                        };
                    }
                    accumulate(&mut grads[p.0], dp);
                }
            }
            Op::Dice { p, target, eps } => {
                if wants(*p) {
                    let s = self.shape(*p);
                    let np = s.plane();
                    let pv = self.value(*p).data();
                    let mut dp = Tensor::zeros(s);
                    for i in 0..s.n {
                        let r = i * np..(i + 1) * np;
                        let (inter, sy, sp) = dice_sums(&pv[r.clone()], &target.data()[r.clone()]);
                        let num = 2.0 * inter + eps;
                        let den = sy + sp + eps;
                        let gi = g.data()[i];
                        for j in r {
                            let dnum = 2.0 * target.data()[j];
                            let dden = 2.0 * pv[j];
                            dp.data_mut()[j] = -gi * (dnum * den - num * dden) / (den * den);
                        }
                    }
                    accumulate(&mut grads[p.0], dp);
                }
            }
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("elementwise length")
}

/// `(sum(y p), sum(y^2), sum(p^2))` over one image.
fn dice_sums(p: &[f64], y: &[f64]) -> (f64, f64, f64) {
    p.iter().zip(y).fold((0.0, 0.0, 0.0), |(i, sy, sp), (&p, &y)| {
        (i + y * p, sy + y * y, sp + p * p)
    })
}
