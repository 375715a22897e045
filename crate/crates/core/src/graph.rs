//! Reverse-mode autodiff over a flat tape of tensor nodes.
//!
//! Deliberately minimal: only the operations the mask generator, the U-Net
//! discriminator and their losses need. A forward pass appends nodes in
//! evaluation order; `backward` walks the tape in reverse, accumulating
//! gradients into the nodes that require them.

use crate::conv::{conv2d_backward, conv2d_forward};
use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};
fn map_elems<T: Elem>(src: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    let mut out = Tensor::zeros(src.shape());
    for (ov, sv) in out.data_mut().iter_mut().zip(src.data()) {
        *ov = f(*sv);
    }
    out
}

fn zip_elems<T: Elem>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let mut out = Tensor::zeros(a.shape());
    for ((ov, xv), yv) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *ov = f(*xv, *yv);
    }
    out
}

/// Clamp bound for probability-space binary cross entropy.
pub const BCE_EPS_CLIP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        input: NodeId,
        slope: T,
    },
    Sigmoid {
        input: NodeId,
    },
    AvgPool2 {
        input: NodeId,
    },
    UpsampleNearest2 {
        input: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        // per-channel statistics saved by the forward pass
        mean: Vec<T>,
        invstd: Vec<T>,
    },
    Composite {
        fg: NodeId,
        bg: NodeId,
        mask: NodeId,
    },
    Bce {
        pred: NodeId,
        target: NodeId,
    },
    BceWeighted {
        pred: NodeId,
        target: NodeId,
        weight: NodeId,
    },
    BceWithLogits {
        logits: NodeId,
        target: NodeId,
    },
    Axpby {
        a: NodeId,
        b: NodeId,
        alpha: T,
        beta: T,
    },
    MeanAll {
        input: NodeId,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert an input tensor. Gradients are accumulated only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let out = conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let rg = self.requires(input)
            || self.requires(kernel)
            || bias.is_some_and(|b| self.requires(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> NodeId {
        debug_assert!(slope > 0.0 && slope < 1.0);
        let s = T::from_f64(slope);
        let out = map_elems(self.value(input), |v| if v > T::ZERO { v } else { v * s });
        let rg = self.requires(input);
        self.push(out, Op::LeakyRelu { input, slope: s }, rg)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = map_elems(self.value(input), sigmoid_scalar);
        let rg = self.requires(input);
        self.push(out, Op::Sigmoid { input }, rg)
    }

    /// 2x2 average pooling, stride 2. Spatial extents must be even.
    pub fn avg_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (n, c, h, w) = nchw(x, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch {
                op: "avg_pool2",
                detail: format!("spatial extents must be even, got {}x{}", h, w),
            });
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let quarter = T::from_f64(0.25);
        {
            let xd = x.data();
            let od = out.data_mut();
            for p in 0..n * c {
                let xp = &xd[p * h * w..(p + 1) * h * w];
                let op_ = &mut od[p * ho * wo..(p + 1) * ho * wo];
                for oy in 0..ho {
                    let r0 = &xp[2 * oy * w..(2 * oy + 1) * w];
                    let r1 = &xp[(2 * oy + 1) * w..(2 * oy + 2) * w];
                    let dst = &mut op_[oy * wo..(oy + 1) * wo];
                    for ((d, a), b) in
                        dst.iter_mut().zip(r0.chunks_exact(2)).zip(r1.chunks_exact(2))
                    {
                        *d = ((a[0] + a[1]) + (b[0] + b[1])) * quarter;
                    }
                }
            }
        }
        let rg = self.requires(input);
        Ok(self.push(out, Op::AvgPool2 { input }, rg))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (n, c, h, w) = nchw(x, "upsample_nearest2")?;
        let (ho, wo) = (h * 2, w * 2);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        {
            let xd = x.data();
            let od = out.data_mut();
            for p in 0..n * c {
                let xp = &xd[p * h * w..(p + 1) * h * w];
                let op_ = &mut od[p * ho * wo..(p + 1) * ho * wo];
                for y in 0..h {
                    let src = &xp[y * w..(y + 1) * w];
                    let (row0, rest) = op_[2 * y * wo..(2 * y + 2) * wo].split_at_mut(wo);
                    for (pair, &v) in row0.chunks_exact_mut(2).zip(src) {
                        pair[0] = v;
                        pair[1] = v;
                    }
                    rest.copy_from_slice(row0);
                }
            }
        }
        let rg = self.requires(input);
        Ok(self.push(out, Op::UpsampleNearest2 { input }, rg))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, ca, h, w) = nchw(ta, "concat_channels")?;
        let (nb, cb, hb, wb) = nchw(tb, "concat_channels")?;
        if n != nb || h != hb || w != wb {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
        {
            let (ad, bd) = (ta.data(), tb.data());
            let od = out.data_mut();
            let hw = h * w;
            for i in 0..n {
                od[i * (ca + cb) * hw..i * (ca + cb) * hw + ca * hw]
                    .copy_from_slice(&ad[i * ca * hw..(i + 1) * ca * hw]);
                od[i * (ca + cb) * hw + ca * hw..(i + 1) * (ca + cb) * hw]
                    .copy_from_slice(&bd[i * cb * hw..(i + 1) * cb * hw]);
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::ConcatChannels { a, b }, rg))
    }

    /// N×C×H×W → N×C mean over the spatial extents.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (n, c, h, w) = nchw(x, "global_avg_pool")?;
        let mut out = Tensor::zeros(&[n, c]);
        let inv = T::from_f64(1.0 / (h * w) as f64);
        {
            let xd = x.data();
            let od = out.data_mut();
            for p in 0..n * c {
                let mut s = T::ZERO;
                for v in &xd[p * h * w..(p + 1) * h * w] {
                    s += *v;
                }
                od[p] = s * inv;
            }
        }
        let rg = self.requires(input);
        Ok(self.push(out, Op::GlobalAvgPool { input }, rg))
    }

    /// Batch normalization over (N, H, W) per channel, using batch statistics.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let (n, c, h, w) = nchw(x, "batch_norm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                detail: format!(
                    "gamma {:?} / beta {:?}, expected [{}]",
                    self.value(gamma).shape(),
                    self.value(beta).shape(),
                    c
                ),
            });
        }
        let m = (n * h * w) as f64;
        let hw = h * w;
        let mut mean = vec![T::ZERO; c];
        let mut invstd = vec![T::ZERO; c];
        let mut out = Tensor::zeros(x.shape());
        {
            let xd = x.data();
            let gd = self.value(gamma).data().to_vec();
            let bd = self.value(beta).data().to_vec();
            for ch in 0..c {
                let mut s = 0.0f64;
                for i in 0..n {
                    for v in &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                        s += v.to_f64();
                    }
                }
                let mu = s / m;
                let mut var = 0.0f64;
                for i in 0..n {
                    for v in &xd[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                        let d = v.to_f64() - mu;
                        var += d * d;
                    }
                }
                var /= m;
                mean[ch] = T::from_f64(mu);
                invstd[ch] = T::from_f64(1.0 / (var + eps).sqrt());
            }
            let od = out.data_mut();
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    let (mu, is, g, b) = (mean[ch], invstd[ch], gd[ch], bd[ch]);
                    for j in 0..hw {
                        od[base + j] = (xd[base + j] - mu) * is * g + b;
                    }
                }
            }
        }
        let rg = self.requires(input) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                invstd,
            },
            rg,
        ))
    }

    /// Per-pixel convex blend: mask·fg + (1−mask)·bg, mask broadcast over
    /// channels.
    pub fn composite(&mut self, fg: NodeId, bg: NodeId, mask: NodeId) -> Result<NodeId> {
        let (tf, tb, tm) = (self.value(fg), self.value(bg), self.value(mask));
        let (n, c, h, w) = nchw(tf, "composite")?;
        if tb.shape() != tf.shape() {
            return Err(Error::ShapeMismatch {
                op: "composite",
                detail: format!("fg {:?} vs bg {:?}", tf.shape(), tb.shape()),
            });
        }
        if tm.shape() != [n, 1, h, w] {
            return Err(Error::ShapeMismatch {
                op: "composite",
                detail: format!("mask {:?}, expected [{}, 1, {}, {}]", tm.shape(), n, h, w),
            });
        }
        let hw = h * w;
        let mut out = Tensor::zeros(tf.shape());
        {
            let (fd, bd, md) = (tf.data(), tb.data(), tm.data());
            let od = out.data_mut();
            for i in 0..n {
                let mrow = &md[i * hw..(i + 1) * hw];
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    for j in 0..hw {
                        let m = mrow[j];
                        od[base + j] = m * fd[base + j] + (T::ONE - m) * bd[base + j];
                    }
                }
            }
        }
        let rg = self.requires(fg) || self.requires(bg) || self.requires(mask);
        Ok(self.push(out, Op::Composite { fg, bg, mask }, rg))
    }

    /// Mean binary cross entropy on probabilities, clamped to
    /// [BCE_EPS_CLIP, 1−BCE_EPS_CLIP]. Scalar output.
    pub fn bce(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(Error::ShapeMismatch {
                op: "binary_cross_entropy",
                detail: format!("pred {:?} vs target {:?}", tp.shape(), tt.shape()),
            });
        }
        let (lo, hi) = (T::from_f64(BCE_EPS_CLIP), T::from_f64(1.0 - BCE_EPS_CLIP));
        let mut acc = 0.0f64;
        for (p, t) in tp.data().iter().zip(tt.data()) {
            let pc = p.max(lo).min(hi);
            acc -= t.to_f64() * pc.to_f64().ln() + (1.0 - t.to_f64()) * (1.0 - pc.to_f64()).ln();
        }
        let val = Tensor::scalar(T::from_f64(acc / tp.len() as f64));
        let rg = self.requires(pred);
        Ok(self.push(val, Op::Bce { pred, target }, rg))
    }

    /// Per-element weighted binary cross entropy on probabilities:
    /// sum(w·ce) / sum(w). Weights are constants (no gradient); an all-zero
    /// weight tensor yields a zero loss with zero gradient.
    pub fn bce_weighted(&mut self, pred: NodeId, target: NodeId, weight: NodeId) -> Result<NodeId> {
        let (tp, tt, tw) = (self.value(pred), self.value(target), self.value(weight));
        if tp.shape() != tt.shape() || tp.shape() != tw.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_weighted",
                detail: format!(
                    "pred {:?}, target {:?}, weight {:?}",
                    tp.shape(),
                    tt.shape(),
                    tw.shape()
                ),
            });
        }
        let (lo, hi) = (T::from_f64(BCE_EPS_CLIP), T::from_f64(1.0 - BCE_EPS_CLIP));
        let mut acc = 0.0f64;
        let mut wsum = 0.0f64;
        for ((p, t), w) in tp.data().iter().zip(tt.data()).zip(tw.data()) {
            let pc = p.max(lo).min(hi);
            let ce = -(t.to_f64() * pc.to_f64().ln()
                + (1.0 - t.to_f64()) * (1.0 - pc.to_f64()).ln());
            acc += w.to_f64() * ce;
            wsum += w.to_f64();
        }
        let val = Tensor::scalar(T::from_f64(if wsum > 0.0 { acc / wsum } else { 0.0 }));
        let rg = self.requires(pred);
        Ok(self.push(val, Op::BceWeighted { pred, target, weight }, rg))
    }

    /// Mean binary cross entropy on raw logits (sigmoid fused in, numerically
    /// stable softplus form). Scalar output.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        let (tz, tt) = (self.value(logits), self.value(target));
        if tz.shape() != tt.shape() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                detail: format!("logits {:?} vs target {:?}", tz.shape(), tt.shape()),
            });
        }
        let mut acc = 0.0f64;
        for (z, t) in tz.data().iter().zip(tt.data()) {
            let (z, t) = (z.to_f64(), t.to_f64());
            // t*softplus(-z) + (1-t)*softplus(z)
            acc += t * softplus(-z) + (1.0 - t) * softplus(z);
        }
        let val = Tensor::scalar(T::from_f64(acc / tz.len() as f64));
        let rg = self.requires(logits);
        Ok(self.push(val, Op::BceWithLogits { logits, target }, rg))
    }

    /// alpha·a + beta·b, elementwise; shapes must match.
    pub fn axpby(&mut self, a: NodeId, alpha: f64, b: NodeId, beta: f64) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "axpby",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let (al, be) = (T::from_f64(alpha), T::from_f64(beta));
        let mut out = Tensor::zeros(ta.shape());
        for ((o, x), y) in out.data_mut().iter_mut().zip(ta.data()).zip(tb.data()) {
            *o = al * *x + be * *y;
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            out,
            Op::Axpby {
                a,
                b,
                alpha: al,
                beta: be,
            },
            rg,
        ))
    }

    /// Mean over all elements, as a scalar node.
    pub fn mean_all(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let mut acc = 0.0f64;
        for v in x.data() {
            acc += v.to_f64();
        }
        let val = Tensor::scalar(T::from_f64(acc / x.len() as f64));
        let rg = self.requires(input);
        self.push(val, Op::MeanAll { input }, rg)
    }

    fn add_grad(&mut self, id: NodeId, delta: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += *dv;
                }
            }
            None => {
                // an exactly-zero gradient contributes nothing; dropping it
                // here prunes whole dead subtrees (e.g. a 0-weighted loss term)
                if delta.data().iter().any(|v| !(*v == T::ZERO)) {
                    node.grad = Some(delta);
                }
            }
        }
    }

    /// Run reverse-mode accumulation from a scalar node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.nodes[loss.0].grad = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::ONE));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(NodeId(i))?;
        }
        Ok(())
    }

    fn backward_node(&mut self, id: NodeId) -> Result<()> {
        let dy = self.nodes[id.0].grad.take().expect("grad present");
        let result = self.backward_node_inner(id, &dy);
        self.nodes[id.0].grad = Some(dy);
        result
    }

    fn backward_node_inner(&mut self, id: NodeId, dy: &Tensor<T>) -> Result<()> {
        match &self.nodes[id.0].op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let need_dx = self.requires(input);
                let need_dw = self.requires(kernel);
                let need_db = bias.is_some_and(|b| self.requires(b));
                let grads = conv2d_backward(
                    self.value(input),
                    self.value(kernel),
                    dy,
                    stride,
                    pad,
                    need_dx,
                    need_dw,
                    need_db,
                )?;
                if let Some(dx) = grads.dx {
                    self.add_grad(input, dx);
                }
                if let Some(dw) = grads.dkernel {
                    self.add_grad(kernel, dw);
                }
                if let (Some(db), Some(b)) = (grads.dbias, bias) {
                    self.add_grad(b, db);
                }
            }
            &Op::LeakyRelu { input, slope } => {
                let dx = zip_elems(dy, self.value(input), |g, xv| {
                    if xv > T::ZERO {
                        g
                    } else {
                        g * slope
                    }
                });
                self.add_grad(input, dx);
            }
            &Op::Sigmoid { input } => {
                let dx = zip_elems(dy, &self.nodes[id.0].value, |g, yv| g * yv * (T::ONE - yv));
                self.add_grad(input, dx);
            }
            &Op::AvgPool2 { input } => {
                let x = self.value(input);
                let (n, c, h, w) = nchw(x, "avg_pool2")?;
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = Tensor::zeros(x.shape());
                let quarter = T::from_f64(0.25);
                {
                    let dxd = dx.data_mut();
                    let dyd = dy.data();
                    for p in 0..n * c {
                        let dyp = &dyd[p * ho * wo..(p + 1) * ho * wo];
                        let dxp = &mut dxd[p * h * w..(p + 1) * h * w];
                        for oy in 0..ho {
                            let src = &dyp[oy * wo..(oy + 1) * wo];
                            let (r0, r1) =
                                dxp[2 * oy * w..(2 * oy + 2) * w].split_at_mut(w);
                            for ((s, a), b) in src
                                .iter()
                                .zip(r0.chunks_exact_mut(2))
                                .zip(r1.chunks_exact_mut(2))
                            {
                                let g = *s * quarter;
                                a[0] += g;
                                a[1] += g;
                                b[0] += g;
                                b[1] += g;
                            }
                        }
                    }
                }
                self.add_grad(input, dx);
            }
            &Op::UpsampleNearest2 { input } => {
                let x = self.value(input);
                let (n, c, h, w) = nchw(x, "upsample_nearest2")?;
                let (ho, wo) = (h * 2, w * 2);
                let mut dx = Tensor::zeros(x.shape());
                {
                    let dxd = dx.data_mut();
                    let dyd = dy.data();
                    for p in 0..n * c {
                        let dyp = &dyd[p * ho * wo..(p + 1) * ho * wo];
                        let dxp = &mut dxd[p * h * w..(p + 1) * h * w];
                        for y in 0..h {
                            let r0 = &dyp[2 * y * wo..(2 * y + 1) * wo];
                            let r1 = &dyp[(2 * y + 1) * wo..(2 * y + 2) * wo];
                            let dst = &mut dxp[y * w..(y + 1) * w];
                            for ((d, a), b) in
                                dst.iter_mut().zip(r0.chunks_exact(2)).zip(r1.chunks_exact(2))
                            {
                                *d += (a[0] + a[1]) + (b[0] + b[1]);
                            }
                        }
                    }
                }
                self.add_grad(input, dx);
            }
            &Op::ConcatChannels { a, b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (n, ca, h, w) = nchw(ta, "concat_channels")?;
                let cb = tb.dim(1);
                let hw = h * w;
                let mut da = Tensor::zeros(ta.shape());
                let mut db = Tensor::zeros(tb.shape());
                {
                    let dyd = dy.data();
                    for i in 0..n {
                        da.data_mut()[i * ca * hw..(i + 1) * ca * hw].copy_from_slice(
                            &dyd[i * (ca + cb) * hw..i * (ca + cb) * hw + ca * hw],
                        );
                        db.data_mut()[i * cb * hw..(i + 1) * cb * hw].copy_from_slice(
                            &dyd[i * (ca + cb) * hw + ca * hw..(i + 1) * (ca + cb) * hw],
                        );
                    }
                }
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            &Op::GlobalAvgPool { input } => {
                let x = self.value(input);
                let (n, c, h, w) = nchw(x, "global_avg_pool")?;
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let mut dx = Tensor::zeros(x.shape());
                {
                    let dxd = dx.data_mut();
                    let dyd = dy.data();
                    for p in 0..n * c {
                        let g = dyd[p] * inv;
                        for v in &mut dxd[p * h * w..(p + 1) * h * w] {
                            *v = g;
                        }
                    }
                }
                self.add_grad(input, dx);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                invstd,
            } => {
                let (input, gamma, beta) = (*input, *gamma, *beta);
                let (mean, invstd) = (mean.clone(), invstd.clone());
                let x = self.value(input);
                let (n, c, h, w) = nchw(x, "batch_norm")?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let gd = self.value(gamma).data().to_vec();
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                let mut dx = Tensor::zeros(x.shape());
                {
                    let xd = x.data();
                    let dyd = dy.data();
                    for ch in 0..c {
                        let (mu, is) = (mean[ch], invstd[ch]);
                        let mut sum_dy = 0.0f64;
                        let mut sum_dy_xhat = 0.0f64;
                        for i in 0..n {
                            let base = (i * c + ch) * hw;
                            for j in 0..hw {
                                let xhat = ((xd[base + j] - mu) * is).to_f64();
                                sum_dy += dyd[base + j].to_f64();
                                sum_dy_xhat += dyd[base + j].to_f64() * xhat;
                            }
                        }
                        dbeta.data_mut()[ch] = T::from_f64(sum_dy);
                        dgamma.data_mut()[ch] = T::from_f64(sum_dy_xhat);
                        let mean_dy = T::from_f64(sum_dy / m);
                        let mean_dy_xhat = T::from_f64(sum_dy_xhat / m);
                        let scale = gd[ch] * is;
                        let dxd = dx.data_mut();
                        for i in 0..n {
                            let base = (i * c + ch) * hw;
                            for j in 0..hw {
                                let xhat = (xd[base + j] - mu) * is;
                                dxd[base + j] =
                                    scale * (dyd[base + j] - mean_dy - xhat * mean_dy_xhat);
                            }
                        }
                    }
                }
                self.add_grad(input, dx);
                self.add_grad(gamma, dgamma);
                self.add_grad(beta, dbeta);
            }
            &Op::Composite { fg, bg, mask } => {
                let (tf, tb, tm) = (self.value(fg), self.value(bg), self.value(mask));
                let (n, c, h, w) = nchw(tf, "composite")?;
                let hw = h * w;
                let mut dfg = Tensor::zeros(tf.shape());
                let mut dbg = Tensor::zeros(tb.shape());
                let mut dmask = Tensor::zeros(tm.shape());
                {
                    let (fd, bd, md) = (tf.data(), tb.data(), tm.data());
                    let dyd = dy.data();
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for j in 0..hw {
                                let g = dyd[base + j];
                                let mv = md[i * hw + j];
                                dfg.data_mut()[base + j] = g * mv;
                                dbg.data_mut()[base + j] = g * (T::ONE - mv);
                                dmask.data_mut()[i * hw + j] +=
                                    g * (fd[base + j] - bd[base + j]);
                            }
                        }
                    }
                }
                self.add_grad(fg, dfg);
                self.add_grad(bg, dbg);
                self.add_grad(mask, dmask);
            }
            &Op::Bce { pred, target } => {
                let g0 = dy.item();
                let (tp, tt) = (self.value(pred), self.value(target));
                let (lo, hi) = (T::from_f64(BCE_EPS_CLIP), T::from_f64(1.0 - BCE_EPS_CLIP));
                let inv_m = T::from_f64(1.0 / tp.len() as f64);
                let mut dp = Tensor::zeros(tp.shape());
                for ((d, &p), &t) in dp.data_mut().iter_mut().zip(tp.data()).zip(tt.data()) {
                    let pc = p.max(lo).min(hi);
                    *d = g0 * inv_m * (pc - t) / (pc * (T::ONE - pc));
                }
                self.add_grad(pred, dp);
            }
            &Op::BceWeighted {
                pred,
                target,
                weight,
            } => {
                let g0 = dy.item();
                let (tp, tt, tw) = (self.value(pred), self.value(target), self.value(weight));
                let wsum: f64 = tw.data().iter().map(|w| w.to_f64()).sum();
                if wsum > 0.0 {
                    let (lo, hi) = (T::from_f64(BCE_EPS_CLIP), T::from_f64(1.0 - BCE_EPS_CLIP));
                    let inv = T::from_f64(1.0 / wsum);
                    let mut dp = Tensor::zeros(tp.shape());
                    for (((d, &p), &t), &w) in dp
                        .data_mut()
                        .iter_mut()
                        .zip(tp.data())
                        .zip(tt.data())
                        .zip(tw.data())
                    {
                        let pc = p.max(lo).min(hi);
                        *d = g0 * inv * w * (pc - t) / (pc * (T::ONE - pc));
                    }
                    self.add_grad(pred, dp);
                }
            }
            &Op::BceWithLogits { logits, target } => {
                let g0 = dy.item();
                let (tz, tt) = (self.value(logits), self.value(target));
                let inv_m = T::from_f64(1.0 / tz.len() as f64);
                let mut dz = Tensor::zeros(tz.shape());
                for ((d, &z), &t) in dz.data_mut().iter_mut().zip(tz.data()).zip(tt.data()) {
                    *d = g0 * inv_m * (sigmoid_scalar(z) - t);
                }
                self.add_grad(logits, dz);
            }
            &Op::Axpby { a, b, alpha, beta } => {
                let da = dy.map(|g| g * alpha);
                let db = dy.map(|g| g * beta);
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            &Op::MeanAll { input } => {
                let x = self.value(input);
                let g = dy.item() * T::from_f64(1.0 / x.len() as f64);
                let dx = Tensor::full(x.shape(), g);
                self.add_grad(input, dx);
            }
        }
        Ok(())
    }
}

fn nchw<T: Elem>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if t.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("expected NCHW tensor, got {:?}", t.shape()),
        });
    }
    Ok((t.dim(0), t.dim(1), t.dim(2), t.dim(3)))
}

pub fn sigmoid_scalar<T: Elem>(x: T) -> T {
    // split on sign to avoid exp overflow
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
