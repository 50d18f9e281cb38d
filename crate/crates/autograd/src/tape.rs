//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only arena of [`Node`]s. Builder methods compute
//! values eagerly and record the operation; [`Tape::backward`] walks the
//! arena in reverse creation order (a valid topological order) and
//! accumulates gradients into every node that transitively feeds a
//! gradient-requiring leaf. Frozen leaves (`requires_grad = false`) receive
//! no gradient and block propagation into subtrees that contain nothing
//! trainable.
//!
//! Gradient accumulation is `+=` in creation order, so repeated use of a node
//! sums its contributions and results are bit-stable across runs.

use crate::conv;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a node on its tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat { axis: usize, parts: Vec<NodeId> },
    Slice0 { x: NodeId, start: usize },
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
        /// Forward im2col buffer (`[ci·kh·kw, oh·ow]`), kept for the weight
        /// gradient; `None` for 1x1/stride-1 convolutions, which need none.
        col: Option<Tensor>,
    },
    GroupNorm { x: NodeId, groups: usize, eps: f64 },
    AddVec { x: NodeId, v: NodeId, axis: usize },
    MulVec { x: NodeId, v: NodeId, axis: usize },
    Softmax { x: NodeId, axis: usize },
    LogSoftmax { x: NodeId },
    Silu(NodeId),
    Abs(NodeId),
    Log(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    SpaceToDepth { x: NodeId, p: usize },
    DepthToSpace { x: NodeId, p: usize },
}

/// One recorded operation: its value, provenance, and (after `backward`) its
/// accumulated gradient.
#[derive(Debug)]
pub struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts an input node. `requires_grad` marks it as a gradient target.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Inserts a constant input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. this node, if one was
    /// accumulated.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add(a, b), req))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Sub(a, b), req))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Mul(a, b), req))
    }

    /// Multiplication by a compile-time constant scalar.
    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        if !k.is_finite() {
            return Err(Error::InvalidArgument(format!("scale by non-finite {k}")));
        }
        let value = self.value(a).scale(k);
        let req = self.requires(a);
        Ok(self.push(value, Op::Scale(a, k), req))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::MatMul(a, b), req))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).transposed()?;
        let req = self.requires(a);
        Ok(self.push(value, Op::Transpose(a), req))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        let req = self.requires(a);
        Ok(self.push(value, Op::Reshape(a), req))
    }

    /// Concatenates tensors of equal rank along `axis`; all other dims must
    /// match.
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() {
                return Err(Error::ShapeMismatch("concat rank mismatch".into()));
            }
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                if d != axis && a != b {
                    return Err(Error::ShapeMismatch(format!(
                        "concat dim {d} mismatch: {a} vs {b}"
                    )));
                }
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; shape.iter().product()];
        let out_stride = axis_total * inner;
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let len_axis = t.shape()[axis];
            let block = len_axis * inner;
            for o in 0..outer {
                let src = &t.data()[o * block..(o + 1) * block];
                let dst_base = o * out_stride + offset * inner;
                data[dst_base..dst_base + block].copy_from_slice(src);
            }
            offset += len_axis;
        }
        let req = parts.iter().any(|&p| self.requires(p));
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { axis, parts: parts.to_vec() }, req))
    }

    /// Slice `len` entries starting at `start` along axis 0.
    pub fn slice0(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(x);
        if t.rank() == 0 || start + len > t.shape()[0] {
            return Err(Error::InvalidArgument(format!(
                "slice0 [{start}, {}) out of range for shape {:?}",
                start + len,
                t.shape()
            )));
        }
        let block: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * block..(start + len) * block].to_vec();
        let req = self.requires(x);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Slice0 { x, start }, req))
    }

    /// 2-D convolution of `x: (ci,h,w)` with `w: (co,ci,kh,kw)`; zero padding.
    /// Bias, when wanted, is a following `add_vec` on axis 0.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d wants x rank 3 and w rank 4, got {xs:?} and {ws:?}"
            )));
        }
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let (co, ci2, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if ci != ci2 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d channel mismatch: input {ci}, kernel expects {ci2}"
            )));
        }
        let oh = conv::out_dim(h, kh, stride.0, pad.0)
            .ok_or_else(|| Error::ShapeMismatch("conv2d kernel taller than padded input".into()))?;
        let ow = conv::out_dim(wd, kw, stride.1, pad.1)
            .ok_or_else(|| Error::ShapeMismatch("conv2d kernel wider than padded input".into()))?;
        let w_mat = self.value(w).reshaped(&[co, ci * kh * kw])?;
        // A 1x1 stride-1 convolution is a plain matmul over the flattened
        // grid; everything else goes through im2col, whose buffer is kept on
        // the node so backward does not rebuild it.
        let pointwise = kh == 1 && kw == 1 && stride == (1, 1) && pad == (0, 0);
        let (out, col) = if pointwise {
            let x_mat = self.value(x).reshaped(&[ci, h * wd])?;
            (w_mat.matmul(&x_mat)?, None)
        } else {
            let col = conv::build_col(self.value(x).data(), ci, h, wd, kh, kw, stride, pad, oh, ow);
            let col_t = Tensor::new(vec![ci * kh * kw, oh * ow], col)?;
            let out = w_mat.matmul(&col_t)?;
            (out, Some(col_t))
        };
        let out = out.reshaped(&[co, oh, ow])?;
        let req = self.requires(x) || self.requires(w);
        Ok(self.push(out, Op::Conv2d { x, w, stride, pad, col }, req))
    }

    /// Group normalization over `(c,h,w)` without affine parameters; apply
    /// `mul_vec`/`add_vec` on axis 0 for a learned scale and shift.
    pub fn group_norm(&mut self, x: NodeId, groups: usize, eps: f64) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "group_norm wants rank 3, got {shape:?}"
            )));
        }
        if groups == 0 || shape[0] % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "group_norm: {groups} groups do not divide {} channels",
                shape[0]
            )));
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("group_norm eps must be positive".into()));
        }
        let value = group_norm_forward(self.value(x), groups, eps);
        let req = self.requires(x);
        Ok(self.push(value, Op::GroupNorm { x, groups, eps }, req))
    }

    /// Adds a vector along `axis`, broadcasting over all other axes.
    pub fn add_vec(&mut self, x: NodeId, v: NodeId, axis: usize) -> Result<NodeId> {
        let value = broadcast_combine(self.value(x), self.value(v), axis, |a, b| a + b)?;
        let req = self.requires(x) || self.requires(v);
        Ok(self.push(value, Op::AddVec { x, v, axis }, req))
    }

    /// Multiplies by a vector along `axis`, broadcasting over all other axes.
    pub fn mul_vec(&mut self, x: NodeId, v: NodeId, axis: usize) -> Result<NodeId> {
        let value = broadcast_combine(self.value(x), self.value(v), axis, |a, b| a * b)?;
        let req = self.requires(x) || self.requires(v);
        Ok(self.push(value, Op::MulVec { x, v, axis }, req))
    }

    /// Row- or column-wise softmax of a rank-2 tensor (`axis` 1 or 0).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(x);
        if t.rank() != 2 || axis > 1 {
            return Err(Error::InvalidArgument(format!(
                "softmax wants a rank-2 tensor and axis 0 or 1, got {:?} axis {axis}",
                t.shape()
            )));
        }
        let value = softmax_forward(t, axis);
        let req = self.requires(x);
        Ok(self.push(value, Op::Softmax { x, axis }, req))
    }

    /// Numerically stable `log(softmax(x))` over rows of a rank-2 tensor.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "log_softmax wants a rank-2 tensor, got {:?}",
                t.shape()
            )));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for c in 0..cols {
                data[r * cols + c] = row[c] - lse;
            }
        }
        let req = self.requires(x);
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::LogSoftmax { x }, req))
    }

    /// SiLU activation `x * sigmoid(x)`.
    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let req = self.requires(x);
        Ok(self.push(value, Op::Silu(x), req))
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(f64::abs);
        let req = self.requires(x);
        Ok(self.push(value, Op::Abs(x), req))
    }

    /// Natural log; all entries must be strictly positive.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite("log of non-positive entry".into()));
        }
        let value = self.value(x).map(f64::ln);
        let req = self.requires(x);
        Ok(self.push(value, Op::Log(x), req))
    }

    /// Mean of all entries; returns a `[1]` scalar node.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).numel() == 0 {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let value = Tensor::scalar(self.value(x).mean());
        let req = self.requires(x);
        Ok(self.push(value, Op::Mean(x), req))
    }

    /// Sum of all entries; returns a `[1]` scalar node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).sum());
        let req = self.requires(x);
        Ok(self.push(value, Op::Sum(x), req))
    }

    /// Rearranges `(c, h, w)` into `(c*p*p, h/p, w/p)`; channel `c*p*p + dy*p + dx`
    /// of the output holds input pixel offset `(dy, dx)` within each patch.
    pub fn space_to_depth(&mut self, x: NodeId, p: usize) -> Result<NodeId> {
        let t = self.value(x);
        let value = space_to_depth_forward(t, p)?;
        let req = self.requires(x);
        Ok(self.push(value, Op::SpaceToDepth { x, p }, req))
    }

    /// Inverse of [`Tape::space_to_depth`].
    pub fn depth_to_space(&mut self, x: NodeId, p: usize) -> Result<NodeId> {
        let t = self.value(x);
        let value = depth_to_space_forward(t, p)?;
        let req = self.requires(x);
        Ok(self.push(value, Op::DepthToSpace { x, p }, req))
    }

    /// Scaled dot-product attention, composed from matmul/softmax nodes:
    /// `softmax(scale * Q Kᵀ) V` with `Q: [nq,d]`, `K: [nk,d]`, `V: [nk,dv]`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, scale: f64) -> Result<NodeId> {
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scores = self.scale(scores, scale)?;
        let weights = self.softmax(scores, 1)?;
        self.matmul(weights, v)
    }

    /// Reverse-mode gradient accumulation from a scalar `loss` node.
    ///
    /// Populates `grad` on every node that requires a gradient; frozen leaves
    /// are skipped. Accumulation order is fixed (reverse creation order, `+=`
    /// per use), so repeated runs are bit-identical.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        )?);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue, // not on any path to the loss
            };
            self.propagate(id, &g, &mut grads)?;
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    /// Adds `delta` into the pending gradient of `id` if it requires grad.
    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) -> Result<()> {
        if !self.requires(id) {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(g) => g.axpy(1.0, &delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let da = g.zip_map(self.value(b), |gv, bv| gv * bv)?;
                    self.accumulate(grads, a, da)?;
                }
                if self.requires(b) {
                    let db = g.zip_map(self.value(a), |gv, av| gv * av)?;
                    self.accumulate(grads, b, db)?;
                }
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, g.scale(*k))?;
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    self.accumulate(grads, a, g.matmul_nt(self.value(b))?)?;
                }
                if self.requires(b) {
                    let at = self.value(a).transposed()?;
                    self.accumulate(grads, b, at.matmul(g)?)?;
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transposed()?)?;
            }
            Op::Reshape(a) => {
                let da = g.reshaped(self.value(*a).shape())?;
                self.accumulate(grads, *a, da)?;
            }
            Op::Concat { axis, parts } => {
                let axis = *axis;
                let shape = self.nodes[id].value.shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let out_stride = shape[axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let p_shape = self.value(p).shape().to_vec();
                    let len_axis = p_shape[axis];
                    let block = len_axis * inner;
                    let mut dp = vec![0.0; p_shape.iter().product()];
                    for o in 0..outer {
                        let src_base = o * out_stride + offset * inner;
                        dp[o * block..(o + 1) * block]
                            .copy_from_slice(&g.data()[src_base..src_base + block]);
                    }
                    offset += len_axis;
                    self.accumulate(grads, p, Tensor::new(p_shape, dp)?)?;
                }
            }
            Op::Slice0 { x, start } => {
                let x_shape = self.value(*x).shape().to_vec();
                let block: usize = x_shape[1..].iter().product();
                let mut dx = vec![0.0; x_shape.iter().product()];
                let begin = start * block;
                dx[begin..begin + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::new(x_shape, dx)?)?;
            }
            Op::Conv2d { x, w, stride, pad, col } => {
                let (x, w, stride, pad) = (*x, *w, *stride, *pad);
                let xs = self.value(x).shape().to_vec();
                let ws = self.value(w).shape().to_vec();
                let (ci, h, wd) = (xs[0], xs[1], xs[2]);
                let (co, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let out_shape = self.nodes[id].value.shape();
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let g_mat = g.reshaped(&[co, oh * ow])?;
                if self.requires(w) {
                    // dW = G · colᵀ, against the forward buffer (or the raw
                    // input for the 1x1 case, where col would equal it).
                    let dw = match col {
                        Some(col) => g_mat.matmul_nt(col)?,
                        None => g_mat.matmul_nt(&self.value(x).reshaped(&[ci, h * wd])?)?,
                    };
                    self.accumulate(grads, w, dw.reshaped(&ws)?)?;
                }
                if self.requires(x) {
                    let w_mat_t = self.value(w).reshaped(&[co, ci * kh * kw])?.transposed()?;
                    let dcol = w_mat_t.matmul(&g_mat)?;
                    if kh == 1 && kw == 1 && stride == (1, 1) && pad == (0, 0) {
                        self.accumulate(grads, x, dcol.reshaped(&xs)?)?;
                    } else {
                        let mut dx = vec![0.0; xs.iter().product()];
                        conv::col_to_input(
                            dcol.data(),
                            &mut dx,
                            ci,
                            h,
                            wd,
                            kh,
                            kw,
                            stride,
                            pad,
                            oh,
                            ow,
                        );
                        self.accumulate(grads, x, Tensor::new(xs, dx)?)?;
                    }
                }
            }
            Op::GroupNorm { x, groups, eps } => {
                let dx = group_norm_backward(self.value(*x), &self.nodes[id].value, g, *groups, *eps)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::AddVec { x, v, axis } => {
                let (x, v, axis) = (*x, *v, *axis);
                if self.requires(x) {
                    self.accumulate(grads, x, g.clone())?;
                }
                if self.requires(v) {
                    let dv = reduce_to_axis(g, axis);
                    self.accumulate(grads, v, dv)?;
                }
            }
            Op::MulVec { x, v, axis } => {
                let (x, v, axis) = (*x, *v, *axis);
                if self.requires(x) {
                    let dx = broadcast_combine(g, self.value(v), axis, |gv, vv| gv * vv)?;
                    self.accumulate(grads, x, dx)?;
                }
                if self.requires(v) {
                    let gx = g.zip_map(self.value(x), |gv, xv| gv * xv)?;
                    let dv = reduce_to_axis(&gx, axis);
                    self.accumulate(grads, v, dv)?;
                }
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[id].value;
                let dx = softmax_backward(y, g, *axis)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::LogSoftmax { x } => {
                // dx = g - softmax(x) * rowsum(g)
                let y = &self.nodes[id].value; // log probabilities
                let (rows, cols) = (y.shape()[0], y.shape()[1]);
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let g_row = &g.data()[r * cols..(r + 1) * cols];
                    let y_row = &y.data()[r * cols..(r + 1) * cols];
                    let g_sum: f64 = g_row.iter().sum();
                    for c in 0..cols {
                        dx[r * cols + c] = g_row[c] - y_row[c].exp() * g_sum;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?)?;
            }
            Op::Silu(x) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| {
                    let s = sigmoid(xv);
                    gv * (s * (1.0 + xv * (1.0 - s)))
                })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Abs(x) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| gv * sign(xv))?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Log(x) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| gv / xv)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                let dx = Tensor::full(self.value(*x).shape(), g.data()[0] / n);
                self.accumulate(grads, *x, dx)?;
            }
            Op::Sum(x) => {
                let dx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                self.accumulate(grads, *x, dx)?;
            }
            Op::SpaceToDepth { x, p } => {
                let dx = depth_to_space_forward(g, *p)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::DepthToSpace { x, p } => {
                let dx = space_to_depth_forward(g, *p)?;
                self.accumulate(grads, *x, dx)?;
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn group_norm_forward(x: &Tensor, groups: usize, eps: f64) -> Tensor {
    let shape = x.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let group_ch = c / groups;
    let group_len = group_ch * h * w;
    let mut out = vec![0.0; x.numel()];
    for gi in 0..groups {
        let seg = &x.data()[gi * group_len..(gi + 1) * group_len];
        let mean = seg.iter().sum::<f64>() / group_len as f64;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / group_len as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        let dst = &mut out[gi * group_len..(gi + 1) * group_len];
        for (o, &v) in dst.iter_mut().zip(seg) {
            *o = (v - mean) * inv_std;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("shape preserved")
}

fn group_norm_backward(
    x: &Tensor,
    y: &Tensor,
    g: &Tensor,
    groups: usize,
    eps: f64,
) -> Result<Tensor> {
    let shape = x.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let group_len = (c / groups) * h * w;
    let mut dx = vec![0.0; x.numel()];
    for gi in 0..groups {
        let r = gi * group_len..(gi + 1) * group_len;
        let xs = &x.data()[r.clone()];
        let ys = &y.data()[r.clone()];
        let gs = &g.data()[r.clone()];
        let n = group_len as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        let g_mean = gs.iter().sum::<f64>() / n;
        let gy_mean = gs.iter().zip(ys).map(|(&gv, &yv)| gv * yv).sum::<f64>() / n;
        for ((d, &gv), &yv) in dx[r].iter_mut().zip(gs).zip(ys) {
            *d = inv_std * (gv - g_mean - yv * gy_mean);
        }
    }
    Tensor::new(shape.to_vec(), dx)
}

fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; rows * cols];
    if axis == 1 {
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            softmax_slice(row.iter().cloned(), &mut out[r * cols..(r + 1) * cols]);
        }
    } else {
        let mut buf = vec![0.0; rows];
        for cidx in 0..cols {
            softmax_slice((0..rows).map(|r| x.data()[r * cols + cidx]), &mut buf);
            for r in 0..rows {
                out[r * cols + cidx] = buf[r];
            }
        }
    }
    Tensor::new(vec![rows, cols], out).expect("shape preserved")
}

fn softmax_slice(values: impl Iterator<Item = f64> + Clone, out: &mut [f64]) {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(values) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Result<Tensor> {
    let (rows, cols) = (y.shape()[0], y.shape()[1]);
    let mut dx = vec![0.0; rows * cols];
    if axis == 1 {
        for r in 0..rows {
            let y_row = &y.data()[r * cols..(r + 1) * cols];
            let g_row = &g.data()[r * cols..(r + 1) * cols];
            let dot: f64 = y_row.iter().zip(g_row).map(|(&a, &b)| a * b).sum();
            for c in 0..cols {
                dx[r * cols + c] = y_row[c] * (g_row[c] - dot);
            }
        }
    } else {
        for c in 0..cols {
            let mut dot = 0.0;
            for r in 0..rows {
                dot += y.data()[r * cols + c] * g.data()[r * cols + c];
            }
            for r in 0..rows {
                let i = r * cols + c;
                dx[i] = y.data()[i] * (g.data()[i] - dot);
            }
        }
    }
    Tensor::new(vec![rows, cols], dx)
}

/// Applies `f(x_entry, v[coord_along_axis])` elementwise with `v` broadcast.
fn broadcast_combine(
    x: &Tensor,
    v: &Tensor,
    axis: usize,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if v.rank() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "broadcast vector must be rank 1, got {:?}",
            v.shape()
        )));
    }
    if axis >= x.rank() || x.shape()[axis] != v.numel() {
        return Err(Error::ShapeMismatch(format!(
            "axis {axis} of {:?} does not match vector of length {}",
            x.shape(),
            v.numel()
        )));
    }
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let axis_len = x.shape()[axis];
    let mut out = vec![0.0; x.numel()];
    for (i, (&xv, o)) in x.data().iter().zip(out.iter_mut()).enumerate() {
        let coord = (i / inner) % axis_len;
        *o = f(xv, v.data()[coord]);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Sums all axes of `g` except `axis`, producing a rank-1 tensor.
fn reduce_to_axis(g: &Tensor, axis: usize) -> Tensor {
    let inner: usize = g.shape()[axis + 1..].iter().product();
    let axis_len = g.shape()[axis];
    let mut out = vec![0.0; axis_len];
    for (i, &gv) in g.data().iter().enumerate() {
        out[(i / inner) % axis_len] += gv;
    }
    Tensor::new(vec![axis_len], out).expect("rank-1 result")
}

fn space_to_depth_forward(x: &Tensor, p: usize) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "space_to_depth wants rank 3, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "space_to_depth: patch {p} does not divide spatial dims {h}x{w}"
        )));
    }
    let (oh, ow) = (h / p, w / p);
    let mut out = vec![0.0; x.numel()];
    for ci in 0..c {
        for dy in 0..p {
            for dx in 0..p {
                let oc = ci * p * p + dy * p + dx;
                for i in 0..oh {
                    let src_row = (ci * h + i * p + dy) * w;
                    let dst_row = (oc * oh + i) * ow;
                    for j in 0..ow {
                        out[dst_row + j] = x.data()[src_row + j * p + dx];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c * p * p, oh, ow], out)
}

fn depth_to_space_forward(x: &Tensor, p: usize) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "depth_to_space wants rank 3, got {shape:?}"
        )));
    }
    let (cp, oh, ow) = (shape[0], shape[1], shape[2]);
    if p == 0 || cp % (p * p) != 0 {
        return Err(Error::InvalidArgument(format!(
            "depth_to_space: channel count {cp} is not a multiple of {p}*{p}"
        )));
    }
    let c = cp / (p * p);
    let (h, w) = (oh * p, ow * p);
    let mut out = vec![0.0; x.numel()];
    for ci in 0..c {
        for dy in 0..p {
            for dx in 0..p {
                let ic = ci * p * p + dy * p + dx;
                for i in 0..oh {
                    let src_row = (ic * oh + i) * ow;
                    let dst_row = (ci * h + i * p + dy) * w;
                    for j in 0..ow {
                        out[dst_row + j * p + dx] = x.data()[src_row + j];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_and_backward_accumulates_reuse() {
        // loss = sum(x + x) has gradient 2 everywhere.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let s = tape.add(x, x).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn mul_self_gives_two_x() {
        // loss = sum(x * x) has gradient 2x.
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[3.0, -4.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0, -8.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_grad_but_graph_flows_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let w = tape.leaf(t(&[2], &[5.0, 7.0]), false);
        let y = tape.mul(x, w).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0, 7.0]);
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[2.5, 2.5, 2.5, 2.5]));
        let y = tape.softmax(x, 1).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, -50.0, 3.0, 700.0, 699.0, -2.0]));
        let y = tape.softmax(x, 1).unwrap();
        let d = tape.value(y).data();
        for r in 0..2 {
            let s: f64 = d[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        // 1x1 kernel with weight 1 is the identity map.
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, w, (1, 1), (0, 0)).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_delta_kernel_shifts() {
        // 3x3 kernel with a single 1 in the center reproduces the input
        // under same-padding.
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(t(&[1, 1, 3, 3], &k));
        let y = tape.conv2d(x, w, (1, 1), (1, 1)).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_stride_two_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 8, 32]));
        let w = tape.constant(Tensor::zeros(&[5, 3, 3, 3]));
        let y = tape.conv2d(x, w, (2, 2), (1, 1)).unwrap();
        assert_eq!(tape.value(y).shape(), &[5, 4, 16]);
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 8.0]));
        let y = tape.group_norm(x, 2, 1e-8).unwrap();
        let d = tape.value(y).data();
        for grp in 0..2 {
            let seg = &d[grp * 4..(grp + 1) * 4];
            let mean: f64 = seg.iter().sum::<f64>() / 4.0;
            let var: f64 = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let mut tape = Tape::new();
        let q = tape.constant(t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let k = tape.constant(t(&[1, 3], &[0.3, -0.2, 0.9]));
        let v = tape.constant(t(&[1, 2], &[4.0, -7.0]));
        let y = tape.attention(q, k, v, 1.0).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0, -7.0, 4.0, -7.0]);
    }

    #[test]
    fn space_to_depth_round_trip() {
        let data: Vec<f64> = (0..2 * 4 * 6).map(|v| v as f64).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 4, 6], &data));
        let z = tape.space_to_depth(x, 2).unwrap();
        assert_eq!(tape.value(z).shape(), &[8, 2, 3]);
        let back = tape.depth_to_space(z, 2).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }

    #[test]
    fn concat_axis0_and_axis1() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let c0 = tape.concat(0, &[a, b]).unwrap();
        assert_eq!(tape.value(c0).data(), &[1.0, 2.0, 3.0, 4.0]);
        let c1 = tape.concat(1, &[a, b]).unwrap();
        assert_eq!(tape.value(c1).shape(), &[1, 4]);
        assert_eq!(tape.value(c1).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn slice0_backward_scatters() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]), true);
        let s = tape.slice0(x, 1, 1).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0., 0., 1., 1., 0., 0.]);
    }

    #[test]
    fn mean_backward_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1., 2., 3., 4.]), true);
        let m = tape.mean(x).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(tape.log(x).is_err());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[0.3, -1.2, 2.0, 0.7]), true);
        let s = tape.silu(x).unwrap();
        let loss = tape.mean(s).unwrap();
        tape.backward(loss).unwrap();
        let first = tape.grad(x).unwrap().clone();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &first);
    }

    #[test]
    fn log_softmax_matches_composed() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0.2, -1.0, 2.5]));
        let ls = tape.log_softmax(x).unwrap();
        let sm = tape.softmax(x, 1).unwrap();
        let lg = tape.log(sm).unwrap();
        for (a, b) in tape.value(ls).data().iter().zip(tape.value(lg).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
// Scratch op-cost probe; appended to tape.rs tests temporarily.

}
