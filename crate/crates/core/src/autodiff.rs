//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive application in the order it is
//! evaluated, so node ids are already a topological order. Calling
//! [`Graph::backward`] walks the record once in reverse and returns the
//! gradient of a scalar root with respect to every leaf created with
//! `requires_grad`.
//!
//! ```
//! use geomattn::autodiff::Graph;
//! use geomattn::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::acm;
use crate::error::{Error, Result};
use crate::kernels;
use crate::losses;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch-norm evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

/// Exponential moving averages of batch statistics used in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of batches folded in; zero means no statistics exist yet.
    pub batches: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels], batches: 0 }
    }

    pub fn is_initialized(&self) -> bool {
        self.batches > 0
    }

    /// Folds one batch in with the given momentum; the running variance
    /// tracks the unbiased estimate.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        let unbias = if batch.count > 1 { batch.count as f64 / (batch.count - 1) as f64 } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch.var[c] * unbias;
        }
        self.batches += 1;
    }
}

/// Which statistics a batch-norm node normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    Train,
    Eval { mean: &'a [f64], var: &'a [f64] },
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Neg(NodeId),
    Softplus(NodeId),
    MatMul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Transpose(NodeId),
    Conv2d { x: NodeId, kernel: NodeId, stride: usize, pad: usize },
    BatchNorm { x: NodeId, gamma: NodeId, beta: Option<NodeId>, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    GlobalAvgPool(NodeId),
    ConcatCols(NodeId, NodeId),
    StackRows(NodeId, NodeId),
    L2Normalize { x: NodeId, eps: f64, norms: Vec<f64> },
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    NeighborhoodSoftmax { x: NodeId, window: usize, lse: Vec<f64> },
    ChannelNms { x: NodeId, argmax: Vec<usize> },
    ChannelMax { x: NodeId, argmax: Vec<usize> },
    SpatialNormalize { x: NodeId, sums: Vec<f64> },
    MaskChannels { x: NodeId, mask: NodeId },
    HardTriplet { x: NodeId, choices: Vec<losses::TripletChoice> },
    SmoothedCe { logits: NodeId, targets: Vec<f64>, probs: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | MatMul(a, b)
            | AddRowBias(a, b)
            | ConcatCols(a, b)
            | StackRows(a, b) => vec![*a, *b],
            Scale(a, _)
            | AddScalar(a)
            | Relu(a)
            | Exp(a)
            | Log(a)
            | Neg(a)
            | Softplus(a)
            | Transpose(a)
            | GlobalAvgPool(a)
            | Reshape(a)
            | Sum(a)
            | Mean(a) => vec![*a],
            Conv2d { x, kernel, .. } => vec![*x, *kernel],
            BatchNorm { x, gamma, beta, .. } => {
                let mut v = vec![*x, *gamma];
                v.extend(beta);
                v
            }
            L2Normalize { x, .. }
            | NeighborhoodSoftmax { x, .. }
            | ChannelNms { x, .. }
            | ChannelMax { x, .. }
            | SpatialNormalize { x, .. }
            | HardTriplet { x, .. } => vec![*x],
            MaskChannels { x, mask } => vec![*x, *mask],
            SmoothedCe { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to the graph's trainable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a `requires_grad` leaf. Leaves with no path to the root
    /// get a zero tensor; other nodes return `None`.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

/// Record of primitive applications for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients (inputs, fixed buffers).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("zip of equal shapes")
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::domain("log", format!("non-positive argument {bad}")));
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    // ---- dense layers --------------------------------------------------

    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2("matmul")?;
        let (d2, m) = self.value(w).dims2("matmul")?;
        if d != d2 {
            return Err(Error::shape("matmul", format!("inner dimensions {d} and {d2} differ")));
        }
        let mut out = vec![0.0; n * m];
        kernels::gemm(n, d, m, self.value(x).data(), false, self.value(w).data(), false, &mut out, 0.0);
        let v = Tensor::new(&[n, m], out)?;
        Ok(self.push(v, Op::MatMul(x, w)))
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, m) = self.value(x).dims2("add_row_bias")?;
        if self.value(bias).shape() != [m] {
            return Err(Error::shape("add_row_bias", format!("bias {:?} for {m} columns", self.value(bias).shape())));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(m) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        let v = Tensor::new(&[n, m], data)?;
        Ok(self.push(v, Op::AddRowBias(x, bias)))
    }

    /// `x · w (+ bias)`; pass `None` for the bias-free variant.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2("transpose")?;
        let src = self.value(x).data();
        let v = Tensor::from_fn(&[c, r], |i| src[(i % r) * c + i / r]);
        Ok(self.push(v, Op::Transpose(x)))
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let v = kernels::conv2d_forward(self.value(x), self.value(kernel), stride, pad)?;
        Ok(self.push(v, Op::Conv2d { x, kernel, stride, pad }))
    }

    /// Batch normalization over `[n,c]` or `[n,c,h,w]` inputs. In train mode
    /// the batch statistics are returned so the caller can fold them into its
    /// running estimates.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: Option<NodeId>,
        eps: f64,
        mode: BnMode<'_>,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let xs = self.value(x);
        let (n, c, spatial) = match *xs.shape() {
            [n, c] => (n, c, 1),
            [n, c, h, w] => (n, c, h * w),
            _ => return Err(Error::shape("batch_norm", format!("unsupported input {:?}", xs.shape()))),
        };
        if self.value(gamma).shape() != [c] || beta.is_some_and(|b| self.value(b).shape() != [c]) {
            return Err(Error::shape("batch_norm", format!("affine parameters must have shape [{c}]")));
        }
        let count = n * spatial;
        let data = xs.data();
        let at = |b: usize, ch: usize| b * c * spatial + ch * spatial;
        let (mean, var, train) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::shape("batch_norm", "train mode needs at least two values per channel"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += data[at(b, ch)..at(b, ch) + spatial].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for b in 0..n {
                        q += data[at(b, ch)..at(b, ch) + spatial].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / count as f64;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics have the wrong length"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = beta.map(|b| self.value(b).data());
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for b in 0..n {
            for ch in 0..c {
                let shift = bt.map_or(0.0, |bt| bt[ch]);
                for i in at(b, ch)..at(b, ch) + spatial {
                    let h = (data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + shift;
                }
            }
        }
        let v = Tensor::new(xs.shape(), out)?;
        let stats = train.then_some(BatchStats { mean, var, count });
        let id = self.push(v, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train });
        Ok((id, stats))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let area = (h * w) as f64;
        let v =
            Tensor::new(&[n, c], self.value(x).data().chunks(h * w).map(|p| p.iter().sum::<f64>() / area).collect())?;
        Ok(self.push(v, Op::GlobalAvgPool(x)))
    }

    /// Column-wise concatenation `[a | b]` of two matrices with equal row count.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, d1) = self.value(a).dims2("concat")?;
        let (n2, d2) = self.value(b).dims2("concat")?;
        if n != n2 {
            return Err(Error::shape("concat", format!("leading dimensions {n} and {n2} differ")));
        }
        let mut data = Vec::with_capacity(n * (d1 + d2));
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * d1..(i + 1) * d1]);
            data.extend_from_slice(&self.value(b).data()[i * d2..(i + 1) * d2]);
        }
        let v = Tensor::new(&[n, d1 + d2], data)?;
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    /// Row-wise stacking of two matrices with equal column count.
    pub fn stack_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n1, d) = self.value(a).dims2("stack_rows")?;
        let (n2, d2) = self.value(b).dims2("stack_rows")?;
        if d != d2 {
            return Err(Error::shape("stack_rows", format!("column counts {d} and {d2} differ")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let v = Tensor::new(&[n1 + n2, d], data)?;
        Ok(self.push(v, Op::StackRows(a, b)))
    }

    /// Divides each row by `max(‖row‖₂, eps)`; zero rows stay zero.
    pub fn l2_normalize(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2("l2_normalize")?;
        let src = self.value(x).data();
        let norms: Vec<f64> = src.chunks(d.max(1)).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let data = src.iter().enumerate().map(|(i, v)| v / norms[i / d].max(eps)).collect();
        let v = Tensor::new(&[n, d], data)?;
        Ok(self.push(v, Op::L2Normalize { x, eps, norms }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(v, Op::Mean(x))
    }

    // ---- attention computing module ------------------------------------

    /// Per-channel softmax over the `window × window` neighborhood of every
    /// location of `x[n,c,h,w]`, with windows truncated at the border.
    pub fn neighborhood_softmax(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let (v, lse) = acm::neighborhood_softmax_forward(self.value(x), window)?;
        Ok(self.push(v, Op::NeighborhoodSoftmax { x, window, lse }))
    }

    /// Divides every channel by the per-location channel maximum.
    pub fn channel_nms(&mut self, x: NodeId) -> Result<NodeId> {
        let (v, argmax) = acm::channel_nms_forward(self.value(x))?;
        Ok(self.push(v, Op::ChannelNms { x, argmax }))
    }

    /// Maximum over the channel axis: `[n,c,h,w] → [n,h,w]`.
    pub fn channel_max(&mut self, x: NodeId) -> Result<NodeId> {
        let (v, argmax) = acm::channel_max_forward(self.value(x))?;
        Ok(self.push(v, Op::ChannelMax { x, argmax }))
    }

    /// Scales each `[h,w]` map of `x[n,h,w]` to unit sum.
    pub fn spatial_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let (v, sums) = acm::spatial_normalize_forward(self.value(x))?;
        Ok(self.push(v, Op::SpatialNormalize { x, sums }))
    }

    /// Multiplies every channel of `x[n,c,h,w]` by `mask[n,h,w]`.
    pub fn mask_channels(&mut self, x: NodeId, mask: NodeId) -> Result<NodeId> {
        let v = acm::mask_channels_forward(self.value(x), self.value(mask))?;
        Ok(self.push(v, Op::MaskChannels { x, mask }))
    }

    // ---- losses ----------------------------------------------------------

    /// Batch-hard triplet loss over rows of `x`, averaged over `anchors`.
    pub fn hard_triplet(&mut self, x: NodeId, labels: &[usize], anchors: &[usize], margin: f64) -> Result<NodeId> {
        let (loss, choices) = losses::hard_triplet_forward(self.value(x), labels, anchors, margin)?;
        Ok(self.push(Tensor::scalar(loss), Op::HardTriplet { x, choices }))
    }

    /// Mean cross-entropy of `logits` against label-smoothed targets.
    pub fn smoothed_cross_entropy(&mut self, logits: NodeId, labels: &[usize], smoothing: f64) -> Result<NodeId> {
        let (loss, targets, probs) = losses::smoothed_ce_forward(self.value(logits), labels, smoothing)?;
        Ok(self.push(Tensor::scalar(loss), Op::SmoothedCe { logits, targets, probs }))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Reverse-mode accumulation from a scalar `root`. May be called once per
    /// recorded forward pass.
    /// Hash of every piecewise choice of the forward pass: ReLU signs,
    /// channel argmaxes, mined triplets and clamped norms. Evaluations with
    /// equal signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => self.value(*a).data().iter().for_each(|v| (*v > 0.0).hash(&mut h)),
                Op::ChannelNms { argmax, .. } | Op::ChannelMax { argmax, .. } => argmax.hash(&mut h),
                Op::HardTriplet { choices, .. } => {
                    for c in choices {
                        (c.anchor, c.positive, c.negative, c.active).hash(&mut h);
                    }
                }
                Op::L2Normalize { norms, eps, .. } => norms.iter().for_each(|n| (n > eps).hash(&mut h)),
                _ => {}
            }
        }
        h.finish()
    }

    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let root_shape = self.value(root).shape().to_vec();
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(&root_shape, 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(&node.op, &node.value, dy.data(), &mut grads)?;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            let is_grad_leaf = matches!(node.op, Op::Leaf) && node.requires_grad;
            if !is_grad_leaf {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn take_grad(&self, grads: &mut [Option<Tensor>], id: NodeId) -> Option<Vec<f64>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        Some(match grads[id.0].take() {
            Some(t) => t.into_data(),
            None => vec![0.0; self.nodes[id.0].value.len()],
        })
    }

    /// Returns a buffer taken with [`Self::take_grad`], adding it to anything
    /// accumulated for the same node in the meantime.
    fn put_grad(&self, grads: &mut [Option<Tensor>], id: NodeId, buf: Option<Vec<f64>>) {
        let Some(mut buf) = buf else { return };
        if let Some(existing) = grads[id.0].take() {
            add_into(&mut buf, existing.data());
        }
        let shape = self.nodes[id.0].value.shape();
        grads[id.0] = Some(Tensor::new(shape, buf).expect("gradient buffer matches node shape"));
    }

    fn with_grad(&self, grads: &mut [Option<Tensor>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        let mut buf = self.take_grad(grads, id);
        if let Some(b) = buf.as_deref_mut() {
            f(b);
        }
        self.put_grad(grads, id, buf);
    }

    fn backward_node(&self, op: &Op, y: &Tensor, dy: &[f64], grads: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |id: NodeId| nodes[id.0].value.data();

        use Op::*;
        match op {
            Leaf => {}
            Add(a, b) => {
                self.with_grad(grads, *a, |ga| {
                    add_into(ga, dy);
                });
                self.with_grad(grads, *b, |gb| {
                    add_into(gb, dy);
                });
            }
            Sub(a, b) => {
                self.with_grad(grads, *a, |ga| {
                    add_into(ga, dy);
                });
                self.with_grad(grads, *b, |gb| {
                    gb.iter_mut().zip(dy).for_each(|(g, d)| *g -= d);
                });
            }
            Mul(a, b) => {
                self.with_grad(grads, *a, |ga| {
                    for ((g, d), bv) in ga.iter_mut().zip(dy).zip(val(*b)) {
                        *g += d * bv;
                    }
                });
                self.with_grad(grads, *b, |gb| {
                    for ((g, d), av) in gb.iter_mut().zip(dy).zip(val(*a)) {
                        *g += d * av;
                    }
                });
            }
            Scale(a, s) => {
                self.with_grad(grads, *a, |ga| {
                    ga.iter_mut().zip(dy).for_each(|(g, d)| *g += d * s);
                });
            }
            AddScalar(a) => {
                self.with_grad(grads, *a, |ga| {
                    add_into(ga, dy);
                });
            }
            Relu(a) => {
                self.with_grad(grads, *a, |ga| {
                    for ((g, d), x) in ga.iter_mut().zip(dy).zip(val(*a)) {
                        if *x > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Exp(a) => {
                self.with_grad(grads, *a, |ga| {
                    for ((g, d), e) in ga.iter_mut().zip(dy).zip(y.data()) {
                        *g += d * e;
                    }
                });
            }
            Log(a) => {
                self.with_grad(grads, *a, |ga| {
                    for ((g, d), x) in ga.iter_mut().zip(dy).zip(val(*a)) {
                        *g += d / x;
                    }
                });
            }
            Neg(a) => {
                self.with_grad(grads, *a, |ga| {
                    ga.iter_mut().zip(dy).for_each(|(g, d)| *g -= d);
                });
            }
            Softplus(a) => {
                self.with_grad(grads, *a, |ga| {
                    for ((g, d), x) in ga.iter_mut().zip(dy).zip(val(*a)) {
                        *g += d * sigmoid(*x);
                    }
                });
            }
            MatMul(x, w) => {
                let (n, d) = nodes[x.0].value.dims2("matmul")?;
                let m = nodes[w.0].value.shape()[1];
                self.with_grad(grads, *x, |gx| {
                    kernels::gemm(n, m, d, dy, false, val(*w), true, gx, 1.0);
                });
                self.with_grad(grads, *w, |gw| {
                    kernels::gemm(d, n, m, val(*x), true, dy, false, gw, 1.0);
                });
            }
            AddRowBias(x, b) => {
                self.with_grad(grads, *x, |gx| {
                    add_into(gx, dy);
                });
                self.with_grad(grads, *b, |gb| {
                    let m = gb.len();
                    for row in dy.chunks(m) {
                        add_into(gb, row);
                    }
                });
            }
            Transpose(x) => {
                let (r, c) = nodes[x.0].value.dims2("transpose")?;
                self.with_grad(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += dy[j * r + i];
                        }
                    }
                });
            }
            Conv2d { x, kernel, stride, pad } => {
                let mut gx = self.take_grad(grads, *x);
                let mut gk = self.take_grad(grads, *kernel);
                kernels::conv2d_backward(
                    &nodes[x.0].value,
                    &nodes[kernel.0].value,
                    dy,
                    *stride,
                    *pad,
                    gx.as_deref_mut(),
                    gk.as_deref_mut(),
                )?;
                self.put_grad(grads, *x, gx);
                self.put_grad(grads, *kernel, gk);
            }
            BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let shape = nodes[x.0].value.shape();
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let at = |b: usize, ch: usize| b * c * spatial + ch * spatial;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in at(b, ch)..at(b, ch) + spatial {
                            sum_dy[ch] += dy[i];
                            sum_dy_xhat[ch] += dy[i] * xhat[i];
                        }
                    }
                }
                self.with_grad(grads, *gamma, |gg| {
                    add_into(gg, &sum_dy_xhat);
                });
                if let Some(b) = beta {
                    self.with_grad(grads, *b, |gb| add_into(gb, &sum_dy));
                }
                self.with_grad(grads, *x, |gx| {
                    let gam = val(*gamma);
                    let count = (n * spatial) as f64;
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch];
                            for i in at(b, ch)..at(b, ch) + spatial {
                                gx[i] += if *train {
                                    k * (dy[i] - sum_dy[ch] / count - xhat[i] * sum_dy_xhat[ch] / count)
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                });
            }
            GlobalAvgPool(x) => {
                let (_, _, h, w) = nodes[x.0].value.dims4("global_avg_pool")?;
                self.with_grad(grads, *x, |gx| {
                    let area = (h * w) as f64;
                    for (plane, d) in gx.chunks_mut(h * w).zip(dy) {
                        plane.iter_mut().for_each(|g| *g += d / area);
                    }
                });
            }
            ConcatCols(a, b) => {
                let d1 = nodes[a.0].value.shape()[1];
                let d2 = nodes[b.0].value.shape()[1];
                self.with_grad(grads, *a, |ga| {
                    for (g, row) in ga.chunks_mut(d1.max(1)).zip(dy.chunks(d1 + d2)) {
                        add_into(g, &row[..d1]);
                    }
                });
                self.with_grad(grads, *b, |gb| {
                    if d2 > 0 {
                        for (g, row) in gb.chunks_mut(d2).zip(dy.chunks(d1 + d2)) {
                            add_into(g, &row[d1..]);
                        }
                    }
                });
            }
            StackRows(a, b) => {
                let split = nodes[a.0].value.len();
                self.with_grad(grads, *a, |ga| {
                    add_into(ga, &dy[..split]);
                });
                self.with_grad(grads, *b, |gb| {
                    add_into(gb, &dy[split..]);
                });
            }
            L2Normalize { x, eps, norms } => {
                self.with_grad(grads, *x, |gx| {
                    let d = nodes[x.0].value.shape()[1];
                    if d > 0 {
                        for (r, ((g, dyr), yr)) in
                            gx.chunks_mut(d).zip(dy.chunks(d)).zip(y.data().chunks(d)).enumerate()
                        {
                            let norm = norms[r];
                            if norm > *eps {
                                let dot: f64 = dyr.iter().zip(yr).map(|(a, b)| a * b).sum();
                                for j in 0..d {
                                    g[j] += (dyr[j] - yr[j] * dot) / norm;
                                }
                            } else {
                                for j in 0..d {
                                    g[j] += dyr[j] / eps;
                                }
                            }
                        }
                    }
                });
            }
            Reshape(x) => {
                self.with_grad(grads, *x, |gx| {
                    add_into(gx, dy);
                });
            }
            Sum(x) => {
                self.with_grad(grads, *x, |gx| {
                    gx.iter_mut().for_each(|g| *g += dy[0]);
                });
            }
            Mean(x) => {
                self.with_grad(grads, *x, |gx| {
                    let s = dy[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|g| *g += s);
                });
            }
            NeighborhoodSoftmax { x, window, lse } => {
                self.with_grad(grads, *x, |gx| {
                    acm::neighborhood_softmax_backward(&nodes[x.0].value, y, lse, *window, dy, gx);
                });
            }
            ChannelNms { x, argmax } => {
                self.with_grad(grads, *x, |gx| {
                    acm::channel_nms_backward(&nodes[x.0].value, argmax, dy, gx);
                });
            }
            ChannelMax { x, argmax } => {
                self.with_grad(grads, *x, |gx| {
                    acm::channel_max_backward(&nodes[x.0].value, argmax, dy, gx);
                });
            }
            SpatialNormalize { x, sums } => {
                self.with_grad(grads, *x, |gx| {
                    acm::spatial_normalize_backward(y, sums, dy, gx);
                });
            }
            MaskChannels { x, mask } => {
                let (xv, mv) = (&nodes[x.0].value, &nodes[mask.0].value);
                let mut gx = self.take_grad(grads, *x);
                let mut gm = self.take_grad(grads, *mask);
                acm::mask_channels_backward(xv, mv, dy, gx.as_deref_mut(), gm.as_deref_mut());
                self.put_grad(grads, *x, gx);
                self.put_grad(grads, *mask, gm);
            }
            HardTriplet { x, choices } => {
                self.with_grad(grads, *x, |gx| {
                    losses::hard_triplet_backward(&nodes[x.0].value, choices, dy[0], gx);
                });
            }
            SmoothedCe { logits, targets, probs } => {
                self.with_grad(grads, *logits, |gl| {
                    losses::smoothed_ce_backward(targets, probs, nodes[logits.0].value.shape()[0], dy[0], gl);
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
