//! Dense tensors with reverse-mode gradients.
//!
//! A [`Graph`] is a define-by-run tape: every operation appends a node holding
//! its value, a gradient accumulator, and enough context to push gradients to
//! its parents. Training rebuilds the graph each step; parameters live outside
//! it as [`Param`] and are copied in as leaves, so distinct graphs never share
//! state. [`Graph::backward`] runs one reverse sweep and *adds* into each
//! node's gradient, so calling it twice from the same scalar doubles every
//! gradient exactly.
//!
//! The op set is exactly what the detector needs: strided valid convolution,
//! batch norm, ReLU/sigmoid, fully connected, concat/slice/reshape, mean
//! pooling, axis-wise scaling, binary cross-entropy, and a bidirectional KL
//! divergence. Everything is `f64`.

mod checkpoint;
mod param;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, NamedBuffer};
pub use param::{AdamConfig, BatchNormState, Param};

use thiserror::Error;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside losses.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input too small: {0}")]
    InputTooSmall(String),
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    Add {
        a: Tensor,
        b: Tensor,
    },
    Scale {
        x: Tensor,
        factor: f64,
    },
    Relu {
        x: Tensor,
    },
    Sigmoid {
        x: Tensor,
    },
    Reshape {
        x: Tensor,
    },
    Slice {
        x: Tensor,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Tensor>,
        axis: usize,
    },
    MulBroadcast {
        x: Tensor,
        scale: Tensor,
    },
    MeanAxes {
        x: Tensor,
        axes: Vec<usize>,
    },
    Conv2d {
        x: Tensor,
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
    },
    BatchNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    FullyConnected {
        x: Tensor,
        weight: Tensor,
        bias: Tensor,
    },
    BceWithLogits {
        logits: Tensor,
        targets: Vec<f64>,
    },
    BceProb {
        p: Tensor,
        targets: Vec<f64>,
    },
    BidirectionalKl {
        p: Tensor,
        q: Tensor,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Interprets a shape as `(batch, channels, height, width)`, treating a
/// 3-dimensional tensor as an implicit batch of one.
fn conv_view(shape: &[usize]) -> Option<(usize, usize, usize, usize, bool)> {
    match shape {
        [b, c, h, w] => Some((*b, *c, *h, *w, true)),
        [c, h, w] => Some((1, *c, *h, *w, false)),
        _ => None,
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node { shape, data, grad, op });
        Tensor(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(numel(shape), data.len(), "leaf data does not match shape");
        self.push(shape.to_vec(), data, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> Tensor {
        self.push(vec![1], vec![v], Op::Leaf)
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn data(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn grad(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].grad
    }

    /// Value of a single-element tensor.
    pub fn value(&self, t: Tensor) -> f64 {
        debug_assert_eq!(self.nodes[t.0].data.len(), 1);
        self.nodes[t.0].data[0]
    }

    // ---- elementwise and structural ops ----

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), data, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Tensor, factor: f64) -> Tensor {
        let data = self.data(x).iter().map(|v| v * factor).collect();
        self.push(self.nodes[x.0].shape.clone(), data, Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let data = self.data(x).iter().map(|v| v.max(0.0)).collect();
        self.push(self.nodes[x.0].shape.clone(), data, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        let data = self.data(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        self.push(self.nodes[x.0].shape.clone(), data, Op::Sigmoid { x })
    }

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor, TensorError> {
        if numel(shape) != self.data(x).len() {
            return Err(TensorError::ShapeMismatch(format!(
                "reshape: {:?} has {} elements, target {:?} needs {}",
                self.shape(x),
                self.data(x).len(),
                shape,
                numel(shape)
            )));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape { x }))
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn slice(
        &mut self,
        x: Tensor,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Tensor, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::ShapeMismatch(format!(
                "slice: {start}..{} along axis {axis} of {:?}",
                start + len,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let xd = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&xd[base..base + len * inner]);
        }
        Ok(self.push(out_shape, data, Op::Slice { x, axis, start }))
    }

    pub fn concat(&mut self, xs: &[Tensor], axis: usize) -> Result<Tensor, TensorError> {
        assert!(!xs.is_empty(), "concat needs at least one input");
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "concat axis {axis} out of range for {first:?}"
            )));
        }
        let mut axis_total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat: {s:?} vs {first:?} along axis {axis}"
                )));
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let mut data = vec![0.0; outer * axis_total * inner];
        for o in 0..outer {
            let mut offset = 0;
            for &x in xs {
                let dim = self.shape(x)[axis];
                let block = dim * inner;
                let src = &self.data(x)[o * block..(o + 1) * block];
                let dst_base = o * axis_total * inner + offset;
                data[dst_base..dst_base + block].copy_from_slice(src);
                offset += block;
            }
        }
        Ok(self.push(out_shape, data, Op::Concat { inputs: xs.to_vec(), axis }))
    }

    /// Elementwise product where `scale` may have size 1 along any dimension
    /// (it is broadcast along those dimensions).
    pub fn mul_broadcast(&mut self, x: Tensor, scale: Tensor) -> Result<Tensor, TensorError> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(scale).to_vec();
        let ok = xs.len() == ss.len()
            && xs.iter().zip(&ss).all(|(a, b)| *b == 1 || a == b);
        if !ok {
            return Err(TensorError::ShapeMismatch(format!(
                "mul_broadcast: {xs:?} vs {ss:?}"
            )));
        }
        let proj = broadcast_projection(&xs, &ss);
        let xd = self.data(x);
        let sd = self.data(scale);
        let data = (0..xd.len()).map(|f| xd[f] * sd[proj.offset(f)]).collect();
        Ok(self.push(xs, data, Op::MulBroadcast { x, scale }))
    }

    /// Multiplies every slice of `x` at index `k` along `axis` by `u[k]`.
    /// `u` must be one-dimensional with the length of that axis.
    pub fn scale_along_axis(
        &mut self,
        x: Tensor,
        u: Tensor,
        axis: usize,
    ) -> Result<Tensor, TensorError> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "scale_along_axis: axis {axis} out of range for {xs:?}"
            )));
        }
        let un = self.data(u).len();
        if self.shape(u).len() != 1 || un != xs[axis] {
            return Err(TensorError::ShapeMismatch(format!(
                "scale_along_axis: u has shape {:?}, axis {axis} of {xs:?} has {}",
                self.shape(u),
                xs[axis]
            )));
        }
        let mut target = vec![1usize; xs.len()];
        target[axis] = un;
        let ur = self.reshape(u, &target)?;
        self.mul_broadcast(x, ur)
    }

    /// Mean over the given axes; reduced dimensions are removed from the
    /// shape (a full reduction yields shape `[1]`).
    pub fn global_avg_pool(&mut self, x: Tensor, axes: &[usize]) -> Tensor {
        let xs = self.shape(x).to_vec();
        for &a in axes {
            assert!(a < xs.len(), "pool axis {a} out of range for {xs:?}");
        }
        let mut out_shape: Vec<usize> = xs
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &s)| s)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let proj = reduce_projection(&xs, axes, &out_shape);
        let count: f64 = axes.iter().map(|&a| xs[a] as f64).product();
        let xd = self.data(x);
        let mut data = vec![0.0; numel(&out_shape)];
        for (f, &v) in xd.iter().enumerate() {
            data[proj.offset(f)] += v;
        }
        for v in &mut data {
            *v /= count;
        }
        self.push(out_shape, data, Op::MeanAxes { x, axes: axes.to_vec() })
    }

    // ---- neural-network layers ----

    /// Valid (zero-padding-free) strided cross-correlation with per-channel
    /// bias. `x` is `[B, C_in, H, W]` or `[C_in, H, W]`; `kernel` is
    /// `[C_out, C_in, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Tensor,
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
    ) -> Result<Tensor, TensorError> {
        assert!(stride >= 1, "stride must be at least 1");
        let Some((b, c, h, w, batched)) = conv_view(self.shape(x)) else {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d input must be 3- or 4-dimensional, got {:?}",
                self.shape(x)
            )));
        };
        let ks = self.shape(kernel).to_vec();
        let [co, ci, kh, kw] = ks[..] else {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d kernel must be 4-dimensional, got {ks:?}"
            )));
        };
        if ci != c {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d: input has {c} channels, kernel expects {ci}"
            )));
        }
        if self.shape(bias) != [co] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d: bias shape {:?}, expected [{co}]",
                self.shape(bias)
            )));
        }
        if h < kh || w < kw {
            return Err(TensorError::InputTooSmall(format!(
                "conv2d: {h}x{w} input with {kh}x{kw} kernel"
            )));
        }
        let ho = (h - kh) / stride + 1;
        let wo = (w - kw) / stride + 1;

        let xd = self.data(x);
        let kd = self.data(kernel);
        let bd = self.data(bias);
        let mut out = vec![0.0; b * co * ho * wo];
        for bi in 0..b {
            for o in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = bd[o];
                        for cc in 0..ci {
                            for p in 0..kh {
                                let xrow =
                                    &xd[((bi * c + cc) * h + i * stride + p) * w + j * stride..]
                                        [..kw];
                                let krow = &kd[((o * ci + cc) * kh + p) * kw..][..kw];
                                acc += xrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                        out[((bi * co + o) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        let out_shape = if batched {
            vec![b, co, ho, wo]
        } else {
            vec![co, ho, wo]
        };
        Ok(self.push(out_shape, out, Op::Conv2d { x, kernel, bias, stride }))
    }

    /// Batch normalization over the channel axis with per-channel affine
    /// parameters. Train mode normalizes by batch statistics and folds them
    /// into `state`'s running averages; eval mode normalizes by the running
    /// statistics.
    pub fn batchnorm2d(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        state: &mut BatchNormState,
        momentum: f64,
        eps: f64,
        mode: Mode,
    ) -> Result<Tensor, TensorError> {
        let Some((b, c, h, w, _)) = conv_view(self.shape(x)) else {
            return Err(TensorError::ShapeMismatch(format!(
                "batchnorm input must be 3- or 4-dimensional, got {:?}",
                self.shape(x)
            )));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.channels() != c {
            return Err(TensorError::ShapeMismatch(format!(
                "batchnorm: {c} channels, gamma {:?}, beta {:?}, state {}",
                self.shape(gamma),
                self.shape(beta),
                state.channels()
            )));
        }
        let n = (b * h * w) as f64;
        let xd = self.data(x);
        let plane = h * w;

        let (mean, inv_std) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for cc in 0..c {
                    let mut sum = 0.0;
                    let mut sq = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + cc) * plane;
                        for &v in &xd[base..base + plane] {
                            sum += v;
                            sq += v * v;
                        }
                    }
                    let mu = sum / n;
                    mean[cc] = mu;
                    var[cc] = (sq / n - mu * mu).max(0.0);
                }
                let unbiased: Vec<f64> = if n > 1.0 {
                    var.iter().map(|v| v * n / (n - 1.0)).collect()
                } else {
                    var.clone()
                };
                state.update(&mean, &unbiased, momentum);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (mean, inv_std)
            }
            Mode::Eval => {
                let mean = state.running_mean.clone();
                let inv_std = state
                    .running_var
                    .iter()
                    .map(|v| 1.0 / (v + eps).sqrt())
                    .collect();
                (mean, inv_std)
            }
        };

        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for cc in 0..c {
                let base = (bi * c + cc) * plane;
                let (mu, is, g, be) = (mean[cc], inv_std[cc], gd[cc], bd[cc]);
                for i in 0..plane {
                    out[base + i] = g * (xd[base + i] - mu) * is + be;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train: mode == Mode::Train,
            },
        ))
    }

    /// `y = x W^T + b` with `x: [B, in]`, `weight: [out, in]`, `bias: [out]`.
    pub fn fully_connected(
        &mut self,
        x: Tensor,
        weight: Tensor,
        bias: Tensor,
    ) -> Result<Tensor, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let ([b, input], [out, w_in]) = (&xs[..], &ws[..]) else {
            return Err(TensorError::ShapeMismatch(format!(
                "fully_connected: x {xs:?}, weight {ws:?}"
            )));
        };
        let (b, input, out, w_in) = (*b, *input, *out, *w_in);
        if w_in != input || self.shape(bias) != [out] {
            return Err(TensorError::ShapeMismatch(format!(
                "fully_connected: x {xs:?}, weight {ws:?}, bias {:?}",
                self.shape(bias)
            )));
        }
        let xd = self.data(x);
        let wd = self.data(weight);
        let bd = self.data(bias);
        let mut data = vec![0.0; b * out];
        for bi in 0..b {
            for o in 0..out {
                let mut acc = bd[o];
                let xrow = &xd[bi * input..(bi + 1) * input];
                let wrow = &wd[o * input..(o + 1) * input];
                acc += xrow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                data[bi * out + o] = acc;
            }
        }
        Ok(self.push(vec![b, out], data, Op::FullyConnected { x, weight, bias }))
    }

    // ---- losses ----

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `targets`.
    ///
    /// When `p` is the output of a [`Graph::sigmoid`] node the loss is fused
    /// with it: the forward value is computed from the pre-sigmoid input with
    /// the log-sum-exp form and the gradient w.r.t. that input is the exact
    /// `sigmoid(z) - y`, which stays finite at saturation. Otherwise `p` is
    /// clamped away from {0, 1} before the logs.
    pub fn bce_loss(&mut self, p: Tensor, targets: &[f64]) -> Result<Tensor, TensorError> {
        let n = self.data(p).len();
        if n != targets.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "bce_loss: {n} probabilities vs {} targets",
                targets.len()
            )));
        }
        debug_assert!(targets.iter().all(|&y| y == 0.0 || y == 1.0));
        if let Op::Sigmoid { x: logits } = self.nodes[p.0].op {
            let zd = self.data(logits);
            let mut acc = 0.0;
            for (&z, &y) in zd.iter().zip(targets) {
                acc += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            }
            let loss = acc / n as f64;
            Ok(self.push(
                vec![1],
                vec![loss],
                Op::BceWithLogits { logits, targets: targets.to_vec() },
            ))
        } else {
            let pd = self.data(p);
            let mut acc = 0.0;
            for (&pv, &y) in pd.iter().zip(targets) {
                let pc = clamp_prob(pv);
                acc -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            }
            let loss = acc / n as f64;
            Ok(self.push(vec![1], vec![loss], Op::BceProb { p, targets: targets.to_vec() }))
        }
    }

    /// Mean of `p log(p/q)` plus mean of `q log(q/p)` over all elements, with
    /// both operands clamped away from {0, 1}. Non-negative, zero iff `p == q`
    /// after clamping.
    pub fn bidirectional_kl(&mut self, p: Tensor, q: Tensor) -> Result<Tensor, TensorError> {
        if self.shape(p) != self.shape(q) {
            return Err(TensorError::ShapeMismatch(format!(
                "bidirectional_kl: {:?} vs {:?}",
                self.shape(p),
                self.shape(q)
            )));
        }
        let n = self.data(p).len() as f64;
        let mut acc = 0.0;
        for (&pv, &qv) in self.data(p).iter().zip(self.data(q)) {
            let pc = clamp_prob(pv);
            let qc = clamp_prob(qv);
            let lr = (pc / qc).ln();
            acc += pc * lr - qc * lr;
        }
        let loss = acc / n;
        Ok(self.push(vec![1], vec![loss], Op::BidirectionalKl { p, q }))
    }

    // ---- reverse sweep ----

    /// Accumulates `d root / d node` into every node's gradient. `root` must
    /// be a single-element tensor.
    pub fn backward(&mut self, root: Tensor) {
        assert_eq!(
            self.nodes[root.0].data.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.data.len()])
            .collect();
        grads[root.0][0] = 1.0;

        for i in (0..=root.0).rev() {
            let gout = std::mem::take(&mut grads[i]);
            if gout.iter().all(|&v| v == 0.0) {
                grads[i] = gout;
                continue;
            }
            self.propagate(i, &gout, &mut grads);
            grads[i] = gout;
        }

        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            for (acc, &v) in node.grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Vec<f64>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for (g, &v) in grads[a.0].iter_mut().zip(gout) {
                    *g += v;
                }
                for (g, &v) in grads[b.0].iter_mut().zip(gout) {
                    *g += v;
                }
            }
            Op::Scale { x, factor } => {
                for (g, &v) in grads[x.0].iter_mut().zip(gout) {
                    *g += factor * v;
                }
            }
            Op::Relu { x } => {
                let xd = &self.nodes[x.0].data;
                for ((g, &v), &xv) in grads[x.0].iter_mut().zip(gout).zip(xd) {
                    if xv > 0.0 {
                        *g += v;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let yd = &self.nodes[i].data;
                for ((g, &v), &y) in grads[x.0].iter_mut().zip(gout).zip(yd) {
                    *g += v * y * (1.0 - y);
                }
            }
            Op::Reshape { x } => {
                for (g, &v) in grads[x.0].iter_mut().zip(gout) {
                    *g += v;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = &self.nodes[x.0].shape;
                let len = self.nodes[i].shape[*axis];
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let gx = &mut grads[x.0];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * xs[*axis] + start) * inner;
                    for k in 0..len * inner {
                        gx[dst + k] += gout[src + k];
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = &self.nodes[i].shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0;
                for &x in inputs {
                    let dim = self.nodes[x.0].shape[*axis];
                    let block = dim * inner;
                    let gx = &mut grads[x.0];
                    for o in 0..outer {
                        let src = o * axis_total * inner + offset;
                        let dst = o * block;
                        for k in 0..block {
                            gx[dst + k] += gout[src + k];
                        }
                    }
                    offset += block;
                }
            }
            Op::MulBroadcast { x, scale } => {
                let xs = &self.nodes[x.0].shape;
                let ss = &self.nodes[scale.0].shape;
                let proj = broadcast_projection(xs, ss);
                let xd = &self.nodes[x.0].data;
                let sd = &self.nodes[scale.0].data;
                {
                    let gx = &mut grads[x.0];
                    for (f, &v) in gout.iter().enumerate() {
                        gx[f] += v * sd[proj.offset(f)];
                    }
                }
                let gs = &mut grads[scale.0];
                for (f, &v) in gout.iter().enumerate() {
                    gs[proj.offset(f)] += v * xd[f];
                }
            }
            Op::MeanAxes { x, axes } => {
                let xs = &self.nodes[x.0].shape;
                let proj = reduce_projection(xs, axes, &self.nodes[i].shape);
                let count: f64 = axes.iter().map(|&a| xs[a] as f64).product();
                let gx = &mut grads[x.0];
                for f in 0..gx.len() {
                    gx[f] += gout[proj.offset(f)] / count;
                }
            }
            Op::Conv2d { x, kernel, bias, stride } => {
                let (b, c, h, w, _) = conv_view(&self.nodes[x.0].shape).unwrap();
                let ks = &self.nodes[kernel.0].shape;
                let (co, ci, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
                let out_shape = &self.nodes[i].shape;
                let (ho, wo) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
                let s = *stride;
                let xd = &self.nodes[x.0].data;
                let kd = &self.nodes[kernel.0].data;
                for bi in 0..b {
                    for o in 0..co {
                        for i2 in 0..ho {
                            for j in 0..wo {
                                let g = gout[((bi * co + o) * ho + i2) * wo + j];
                                if g == 0.0 {
                                    continue;
                                }
                                grads[bias.0][o] += g;
                                for cc in 0..ci {
                                    for p in 0..kh {
                                        let xb = ((bi * c + cc) * h + i2 * s + p) * w + j * s;
                                        let kb = ((o * ci + cc) * kh + p) * kw;
                                        for q in 0..kw {
                                            grads[kernel.0][kb + q] += g * xd[xb + q];
                                        }
                                        let gx = &mut grads[x.0];
                                        for q in 0..kw {
                                            gx[xb + q] += g * kd[kb + q];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
                let (b, c, h, w, _) = conv_view(&self.nodes[x.0].shape).unwrap();
                let plane = h * w;
                let n = (b * plane) as f64;
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gamma.0].data;
                for cc in 0..c {
                    let (mu, is, gm) = (mean[cc], inv_std[cc], gd[cc]);
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + cc) * plane;
                        for k in 0..plane {
                            let go = gout[base + k];
                            sum_g += go;
                            sum_gx += go * (xd[base + k] - mu) * is;
                        }
                    }
                    grads[beta.0][cc] += sum_g;
                    grads[gamma.0][cc] += sum_gx;
                    let gx = &mut grads[x.0];
                    if *train {
                        for bi in 0..b {
                            let base = (bi * c + cc) * plane;
                            for k in 0..plane {
                                let go = gout[base + k];
                                let xhat = (xd[base + k] - mu) * is;
                                gx[base + k] +=
                                    gm * is * (go - sum_g / n - xhat * sum_gx / n);
                            }
                        }
                    } else {
                        for bi in 0..b {
                            let base = (bi * c + cc) * plane;
                            for k in 0..plane {
                                gx[base + k] += gm * is * gout[base + k];
                            }
                        }
                    }
                }
            }
            Op::FullyConnected { x, weight, bias } => {
                let (b, input) = {
                    let s = &self.nodes[x.0].shape;
                    (s[0], s[1])
                };
                let out = self.nodes[weight.0].shape[0];
                let xd = &self.nodes[x.0].data;
                let wd = &self.nodes[weight.0].data;
                for bi in 0..b {
                    for o in 0..out {
                        let g = gout[bi * out + o];
                        if g == 0.0 {
                            continue;
                        }
                        grads[bias.0][o] += g;
                        {
                            let gw = &mut grads[weight.0];
                            for k in 0..input {
                                gw[o * input + k] += g * xd[bi * input + k];
                            }
                        }
                        let gx = &mut grads[x.0];
                        for k in 0..input {
                            gx[bi * input + k] += g * wd[o * input + k];
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let g = gout[0] / targets.len() as f64;
                let zd = &self.nodes[logits.0].data;
                let gz = &mut grads[logits.0];
                for ((gv, &z), &y) in gz.iter_mut().zip(zd).zip(targets) {
                    *gv += g * (sigmoid_scalar(z) - y);
                }
            }
            Op::BceProb { p, targets } => {
                let g = gout[0] / targets.len() as f64;
                let pd = &self.nodes[p.0].data;
                let gp = &mut grads[p.0];
                for ((gv, &pv), &y) in gp.iter_mut().zip(pd).zip(targets) {
                    let pc = clamp_prob(pv);
                    *gv += g * (pc - y) / (pc * (1.0 - pc));
                }
            }
            Op::BidirectionalKl { p, q } => {
                let n = self.nodes[p.0].data.len() as f64;
                let g = gout[0] / n;
                let pd = &self.nodes[p.0].data;
                let qd = &self.nodes[q.0].data;
                for f in 0..pd.len() {
                    let pc = clamp_prob(pd[f]);
                    let qc = clamp_prob(qd[f]);
                    let lr = (pc / qc).ln();
                    grads[p.0][f] += g * (lr + 1.0 - qc / pc);
                    grads[q.0][f] += g * (-lr + 1.0 - pc / qc);
                }
            }
        }
    }
}

/// Maps flat indices of a full shape onto a broadcast or reduced companion
/// shape: dimension `d` contributes `index_d * stride_d`, with zero stride for
/// broadcast/reduced dimensions.
struct Projection {
    divisors: Vec<usize>,
    sizes: Vec<usize>,
    strides: Vec<usize>,
}

impl Projection {
    #[inline]
    fn offset(&self, flat: usize) -> usize {
        let mut off = 0;
        for d in 0..self.divisors.len() {
            let idx = (flat / self.divisors[d]) % self.sizes[d];
            off += idx * self.strides[d];
        }
        off
    }
}

fn broadcast_projection(full: &[usize], companion: &[usize]) -> Projection {
    let comp_strides = strides(companion);
    Projection {
        divisors: strides(full),
        sizes: full.to_vec(),
        strides: companion
            .iter()
            .zip(&comp_strides)
            .map(|(&dim, &st)| if dim == 1 { 0 } else { st })
            .collect(),
    }
}

fn reduce_projection(full: &[usize], axes: &[usize], out_shape: &[usize]) -> Projection {
    let out_strides = strides(out_shape);
    let mut kept = 0;
    let mut proj_strides = vec![0usize; full.len()];
    for (d, st) in proj_strides.iter_mut().enumerate() {
        if !axes.contains(&d) {
            *st = out_strides[kept];
            kept += 1;
        }
    }
    Projection {
        divisors: strides(full),
        sizes: full.to_vec(),
        strides: proj_strides,
    }
}
