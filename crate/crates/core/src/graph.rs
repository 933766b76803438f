//! Reverse-mode automatic differentiation over an explicit computation graph.
//!
//! Nodes live in an arena owned by [`Graph`]; every operation appends a node
//! and records its parents. [`Graph::backward`] expresses the backward pass
//! itself in graph operations, so gradients are ordinary nodes and losses
//! defined on gradients (input-gradient or LRP heatmaps) can be
//! differentiated again with a second `backward` call.
//!
//! Broadcasting is restricted to rank-0 scalars and trailing singleton
//! dimensions of one operand.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, Real),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        padding: usize,
    },
    /// Adjoint of `Conv2d` with respect to its input (transposed convolution).
    ConvInputGrad {
        g: NodeId,
        w: NodeId,
        stride: usize,
        padding: usize,
    },
    /// Adjoint of `Conv2d` with respect to its kernel.
    ConvWeightGrad {
        g: NodeId,
        x: NodeId,
        stride: usize,
        padding: usize,
    },
    AvgPool {
        x: NodeId,
        kernel: usize,
    },
    /// Adjoint of `AvgPool`: spreads each value over its kernel block,
    /// divided by kernel².
    AvgUnpool {
        g: NodeId,
        kernel: usize,
    },
    Relu(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Log(NodeId),
    /// 1 where input > 0, else 0. Not differentiable (gradient defined 0).
    StepPos(NodeId),
    /// sign with sign(0) = 0. Not differentiable.
    Signum(NodeId),
    /// sign with sign(0) = +1, as used in LRP-ε denominators. Not differentiable.
    SignPm(NodeId),
    SumAll(NodeId),
    SumTrailing {
        x: NodeId,
        axes: usize,
    },
    /// Broadcast to the node's own shape from a rank-0 or trailing-1 source.
    Broadcast(NodeId),
    MaxTrailing {
        x: NodeId,
        axes: usize,
    },
    /// 1 at the first maximum of each trailing block, else 0. Not differentiable.
    MaxMaskTrailing {
        x: NodeId,
    },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match *self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![a, b],
            Scale(a, _) | AddScalar(a) | Transpose(a) | Reshape(a) | Relu(a) | Abs(a)
            | Sqrt(a) | Exp(a) | Log(a) | StepPos(a) | Signum(a) | SignPm(a) | SumAll(a)
            | Broadcast(a) => vec![a],
            Conv2d { x, w, .. } => vec![x, w],
            ConvInputGrad { g, w, .. } => vec![g, w],
            ConvWeightGrad { g, x, .. } => vec![g, x],
            AvgPool { x, .. } => vec![x],
            AvgUnpool { g, .. } => vec![g],
            SumTrailing { x, .. } | MaxTrailing { x, .. } | MaxMaskTrailing { x, .. } => vec![x],
        }
    }

    /// Ops whose output is piecewise constant carry no gradient.
    fn blocks_gradient(&self) -> bool {
        matches!(
            self,
            Op::StepPos(_) | Op::Signum(_) | Op::SignPm(_) | Op::MaxMaskTrailing { .. }
        )
    }
}

struct NodeData {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Arena of computation nodes. Built per forward pass, dropped afterwards.
pub struct Graph {
    nodes: Vec<NodeData>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: Real) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Copies a node's value into a fresh constant leaf, cutting the graph.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(NodeData {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, context: &str) -> Result<NodeId> {
        value.check_finite(context)?;
        let requires_grad = !op.blocks_gradient()
            && op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    // ---- elementwise and linear ops -------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x + y)?;
        self.push_op(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x - y)?;
        self.push_op(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x * y)?;
        self.push_op(v, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::numeric("division denominator contains exact zero"));
        }
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x / y)?;
        self.push_op(v, Op::Div(a, b), "div")
    }

    pub fn scale(&mut self, a: NodeId, c: Real) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * c);
        self.push_op(v, Op::Scale(a, c), "scale")
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: Real) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push_op(v, Op::AddScalar(a), "add_scalar")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_kernel(self.value(a), self.value(b))?;
        self.push_op(v, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = transpose_kernel(self.value(a))?;
        self.push_op(v, Op::Transpose(a), "transpose")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshaped(shape)?;
        self.push_op(v, Op::Reshape(a), "reshape")
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let v = conv2d_kernel(self.value(x), self.value(w), stride, padding)?;
        self.push_op(v, Op::Conv2d { x, w, stride, padding }, "conv2d")
    }

    pub fn conv_input_grad(
        &mut self,
        g: NodeId,
        w: NodeId,
        stride: usize,
        padding: usize,
        in_hw: (usize, usize),
    ) -> Result<NodeId> {
        let v = conv_input_grad_kernel(self.value(g), self.value(w), stride, padding, in_hw)?;
        self.push_op(v, Op::ConvInputGrad { g, w, stride, padding }, "conv_input_grad")
    }

    pub fn conv_weight_grad(
        &mut self,
        g: NodeId,
        x: NodeId,
        stride: usize,
        padding: usize,
        kernel_hw: (usize, usize),
    ) -> Result<NodeId> {
        let v = conv_weight_grad_kernel(self.value(g), self.value(x), stride, padding, kernel_hw)?;
        self.push_op(v, Op::ConvWeightGrad { g, x, stride, padding }, "conv_weight_grad")
    }

    /// Average pooling over the two trailing axes, stride equal to kernel.
    /// Extents must be divisible by the kernel unless `truncate` is set.
    pub fn avg_pool2d_opts(&mut self, x: NodeId, kernel: usize, truncate: bool) -> Result<NodeId> {
        let v = avg_pool_kernel(self.value(x), kernel, truncate)?;
        self.push_op(v, Op::AvgPool { x, kernel }, "avg_pool2d")
    }

    pub fn avg_pool2d(&mut self, x: NodeId, kernel: usize) -> Result<NodeId> {
        self.avg_pool2d_opts(x, kernel, false)
    }

    pub fn avg_unpool2d(&mut self, g: NodeId, kernel: usize, out_hw: (usize, usize)) -> Result<NodeId> {
        let v = avg_unpool_kernel(self.value(g), kernel, out_hw)?;
        self.push_op(v, Op::AvgUnpool { g, kernel }, "avg_unpool2d")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push_op(v, Op::Relu(a), "relu")
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(Real::abs);
        self.push_op(v, Op::Abs(a), "abs")
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(Real::sqrt);
        self.push_op(v, Op::Sqrt(a), "sqrt")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(Real::exp);
        self.push_op(v, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(Real::ln);
        self.push_op(v, Op::Log(a), "log")
    }

    pub fn step_pos(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push_op(v, Op::StepPos(a), "step_pos")
    }

    pub fn signum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        self.push_op(v, Op::Signum(a), "signum")
    }

    /// sign(0) = +1, the LRP-ε stabilizer convention.
    pub fn sign_pm(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x < 0.0 { -1.0 } else { 1.0 });
        self.push_op(v, Op::SignPm(a), "sign_pm")
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push_op(v, Op::SumAll(a), "sum_all")
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as Real)
    }

    pub fn sum_trailing(&mut self, x: NodeId, axes: usize) -> Result<NodeId> {
        let v = sum_trailing_kernel(self.value(x), axes)?;
        self.push_op(v, Op::SumTrailing { x, axes }, "sum_trailing")
    }

    pub fn broadcast_to(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.value(x).shape() == shape {
            return Ok(x);
        }
        let v = broadcast_kernel(self.value(x), shape)?;
        self.push_op(v, Op::Broadcast(x), "broadcast")
    }

    pub fn max_trailing(&mut self, x: NodeId, axes: usize) -> Result<NodeId> {
        let v = max_trailing_kernel(self.value(x), axes)?;
        self.push_op(v, Op::MaxTrailing { x, axes }, "max_trailing")
    }

    fn max_mask_trailing(&mut self, x: NodeId, axes: usize) -> Result<NodeId> {
        let v = max_mask_kernel(self.value(x), axes)?;
        self.push_op(v, Op::MaxMaskTrailing { x }, "max_mask_trailing")
    }

    /// Max over every element (reduces all axes of a non-empty tensor).
    pub fn max_all(&mut self, x: NodeId) -> Result<NodeId> {
        let flat_len = self.value(x).numel();
        let flat = if self.value(x).rank() == 1 {
            x
        } else {
            self.reshape(x, &[flat_len])?
        };
        self.max_trailing(flat, 1)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode gradient of a scalar `root` with respect to every
    /// reachable node that requires gradient. Gradients are emitted as new
    /// graph nodes, so the result supports differentiation again.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.requires_grad(root) {
            return Ok(Gradients { map: HashMap::new() });
        }

        // post-order over the requires-grad subgraph
        let order = self.topo_order(root);

        let mut cot: HashMap<usize, NodeId> = HashMap::new();
        let seed_shape = self.value(root).shape().to_vec();
        let seed = self.constant(Tensor::full(&seed_shape, 1.0));
        cot.insert(root.0, seed);

        for &nid in order.iter().rev() {
            let g = match cot.get(&nid.0) {
                Some(&g) => g,
                None => continue,
            };
            let op = self.nodes[nid.0].op.clone();
            let terms = self.vjp(nid, &op, g)?;
            for (parent, term) in terms {
                match cot.get(&parent.0) {
                    Some(&acc) => {
                        let summed = self.add(acc, term)?;
                        cot.insert(parent.0, summed);
                    }
                    None => {
                        cot.insert(parent.0, term);
                    }
                }
            }
        }

        let map = cot.into_iter().map(|(k, v)| (k, v)).collect();
        Ok(Gradients { map })
    }

    fn topo_order(&self, root: NodeId) -> Vec<NodeId> {
        let mut visited = vec![false; self.nodes.len()];
        let mut order = Vec::new();
        // iterative post-order DFS
        let mut stack: Vec<(NodeId, usize)> = vec![(root, 0)];
        visited[root.0] = true;
        while let Some((nid, pi)) = stack.pop() {
            let parents = self.nodes[nid.0].op.parents();
            if pi < parents.len() {
                stack.push((nid, pi + 1));
                let p = parents[pi];
                if !visited[p.0] && self.nodes[p.0].requires_grad {
                    visited[p.0] = true;
                    stack.push((p, 0));
                }
            } else {
                order.push(nid);
            }
        }
        order
    }

    /// Emits the vector-Jacobian product terms of one node as graph ops.
    fn vjp(&mut self, nid: NodeId, op: &Op, g: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        use Op::*;
        let mut terms = Vec::new();
        let mut emit = |this: &mut Graph, parent: NodeId, term: NodeId| {
            if this.requires_grad(parent) {
                terms.push((parent, term));
            }
        };
        match *op {
            Leaf | StepPos(_) | Signum(_) | SignPm(_) | MaxMaskTrailing { .. } => {}
            Add(a, b) => {
                if self.requires_grad(a) {
                    let t = self.reduce_to_shape_of(g, a)?;
                    emit(self, a, t);
                }
                if self.requires_grad(b) {
                    let t = self.reduce_to_shape_of(g, b)?;
                    emit(self, b, t);
                }
            }
            Sub(a, b) => {
                if self.requires_grad(a) {
                    let t = self.reduce_to_shape_of(g, a)?;
                    emit(self, a, t);
                }
                if self.requires_grad(b) {
                    let n = self.neg(g)?;
                    let t = self.reduce_to_shape_of(n, b)?;
                    emit(self, b, t);
                }
            }
            Mul(a, b) => {
                if self.requires_grad(a) {
                    let gb = self.mul(g, b)?;
                    let t = self.reduce_to_shape_of(gb, a)?;
                    emit(self, a, t);
                }
                if self.requires_grad(b) {
                    let ga = self.mul(g, a)?;
                    let t = self.reduce_to_shape_of(ga, b)?;
                    emit(self, b, t);
                }
            }
            Div(a, b) => {
                if self.requires_grad(a) {
                    let gb = self.div(g, b)?;
                    let t = self.reduce_to_shape_of(gb, a)?;
                    emit(self, a, t);
                }
                if self.requires_grad(b) {
                    // d(a/b)/db = -a/b² = -out/b
                    let go = self.mul(g, nid)?;
                    let gob = self.div(go, b)?;
                    let n = self.neg(gob)?;
                    let t = self.reduce_to_shape_of(n, b)?;
                    emit(self, b, t);
                }
            }
            Scale(a, c) => {
                let t = self.scale(g, c)?;
                emit(self, a, t);
            }
            AddScalar(a) => {
                emit(self, a, g);
            }
            MatMul(a, b) => {
                if self.requires_grad(a) {
                    let bt = self.transpose(b)?;
                    let t = self.matmul(g, bt)?;
                    emit(self, a, t);
                }
                if self.requires_grad(b) {
                    let at = self.transpose(a)?;
                    let t = self.matmul(at, g)?;
                    emit(self, b, t);
                }
            }
            Transpose(a) => {
                let t = self.transpose(g)?;
                emit(self, a, t);
            }
            Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                let t = self.reshape(g, &shape)?;
                emit(self, a, t);
            }
            Conv2d { x, w, stride, padding } => {
                if self.requires_grad(x) {
                    let hw = spatial_hw(self.value(x).shape())?;
                    let t = self.conv_input_grad(g, w, stride, padding, hw)?;
                    emit(self, x, t);
                }
                if self.requires_grad(w) {
                    let k = kernel_hw(self.value(w).shape())?;
                    let t = self.conv_weight_grad(g, x, stride, padding, k)?;
                    emit(self, w, t);
                }
            }
            ConvInputGrad { g: gi, w, stride, padding } => {
                // bilinear: value = A(gi, w); cotangent u (input-shaped)
                if self.requires_grad(gi) {
                    let t = self.conv2d(g, w, stride, padding)?;
                    emit(self, gi, t);
                }
                if self.requires_grad(w) {
                    let k = kernel_hw(self.value(w).shape())?;
                    let t = self.conv_weight_grad(gi, g, stride, padding, k)?;
                    emit(self, w, t);
                }
            }
            ConvWeightGrad { g: go, x, stride, padding } => {
                if self.requires_grad(go) {
                    let t = self.conv2d(x, g, stride, padding)?;
                    emit(self, go, t);
                }
                if self.requires_grad(x) {
                    let hw = spatial_hw(self.value(x).shape())?;
                    let t = self.conv_input_grad(go, g, stride, padding, hw)?;
                    emit(self, x, t);
                }
            }
            AvgPool { x, kernel } => {
                let hw = spatial_hw(self.value(x).shape())?;
                let t = self.avg_unpool2d(g, kernel, hw)?;
                emit(self, x, t);
            }
            AvgUnpool { g: gp, kernel, .. } => {
                let t = self.avg_pool2d_opts(g, kernel, true)?;
                emit(self, gp, t);
            }
            Relu(a) => {
                let m = self.step_pos(a)?;
                let t = self.mul(g, m)?;
                emit(self, a, t);
            }
            Abs(a) => {
                let s = self.signum(a)?;
                let t = self.mul(g, s)?;
                emit(self, a, t);
            }
            Sqrt(a) => {
                // d√a = g / (2·√a), reusing the output node
                let two = self.scale(nid, 2.0)?;
                let t = self.div(g, two)?;
                emit(self, a, t);
            }
            Exp(a) => {
                let t = self.mul(g, nid)?;
                emit(self, a, t);
            }
            Log(a) => {
                let t = self.div(g, a)?;
                emit(self, a, t);
            }
            SumAll(a) => {
                let shape = self.value(a).shape().to_vec();
                let t = self.broadcast_to(g, &shape)?;
                emit(self, a, t);
            }
            SumTrailing { x, axes } => {
                let xshape = self.value(x).shape().to_vec();
                let mut keep = xshape[..xshape.len() - axes].to_vec();
                keep.extend(std::iter::repeat(1).take(axes));
                let gr = self.reshape(g, &keep)?;
                let t = self.broadcast_to(gr, &xshape)?;
                emit(self, x, t);
            }
            Broadcast(x) => {
                let t = self.reduce_to_shape_of(g, x)?;
                emit(self, x, t);
            }
            MaxTrailing { x, axes } => {
                let xshape = self.value(x).shape().to_vec();
                let mut keep = xshape[..xshape.len() - axes].to_vec();
                keep.extend(std::iter::repeat(1).take(axes));
                let gr = self.reshape(g, &keep)?;
                let gb = self.broadcast_to(gr, &xshape)?;
                let mask = self.max_mask_trailing(x, axes)?;
                let t = self.mul(gb, mask)?;
                emit(self, x, t);
            }
        }
        Ok(terms)
    }

    /// Sums a cotangent down to the shape of `target` (inverse of broadcast).
    fn reduce_to_shape_of(&mut self, g: NodeId, target: NodeId) -> Result<NodeId> {
        let tshape = self.value(target).shape().to_vec();
        let gshape = self.value(g).shape().to_vec();
        if gshape == tshape {
            return Ok(g);
        }
        if tshape.is_empty() {
            return self.sum_all(g);
        }
        // same-rank trailing singleton broadcast
        let t = first_divergent_axis(&gshape, &tshape);
        let axes = gshape.len() - t;
        let s = self.sum_trailing(g, axes)?;
        self.reshape(s, &tshape)
    }
}

/// Gradient map produced by [`Graph::backward`]: node → gradient node.
pub struct Gradients {
    map: HashMap<usize, NodeId>,
}

impl Gradients {
    pub fn grad_node(&self, id: NodeId) -> Option<NodeId> {
        self.map.get(&id.0).copied()
    }

    pub fn grad_tensor<'g>(&self, graph: &'g Graph, id: NodeId) -> Option<&'g Tensor> {
        self.grad_node(id).map(|n| graph.value(n))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }
}

// ---- kernels -------------------------------------------------------------

fn first_divergent_axis(a: &[usize], b: &[usize]) -> usize {
    let mut t = 0;
    while t < a.len() && t < b.len() && a[t] == b[t] {
        t += 1;
    }
    t
}

/// Broadcast plan for one operand against an output shape:
/// each operand element covers `block` consecutive output elements.
fn operand_block(operand: &[usize], out: &[usize]) -> Option<usize> {
    if operand == out {
        return Some(1);
    }
    if operand.is_empty() {
        return Some(out.iter().product::<usize>().max(1));
    }
    if operand.len() != out.len() {
        return None;
    }
    let t = first_divergent_axis(operand, out);
    if operand[t..].iter().all(|&e| e == 1) {
        Some(out[t..].iter().product())
    } else {
        None
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
    let (out_shape, ablock, bblock) = if a.shape() == b.shape() {
        (a.shape().to_vec(), 1, 1)
    } else if let Some(bb) = operand_block(b.shape(), a.shape()) {
        (a.shape().to_vec(), 1, bb)
    } else if let Some(ab) = operand_block(a.shape(), b.shape()) {
        (b.shape().to_vec(), ab, 1)
    } else {
        return Err(Error::dimension(format!(
            "shapes {:?} and {:?} do not broadcast (trailing singletons only)",
            a.shape(),
            b.shape()
        )));
    };
    let numel: usize = out_shape.iter().product::<usize>().max(1);
    let ad = a.data();
    let bd = b.data();
    let data: Vec<Real> = (0..numel).map(|i| f(ad[i / ablock], bd[i / bblock])).collect();
    Ok(Tensor::new(out_shape, data).expect("zip_broadcast shape"))
}

fn matmul_kernel(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
        return Err(Error::dimension(format!(
            "matmul expects [m,k]x[k,n], got {ash:?} x {bsh:?}"
        )));
    }
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn transpose_kernel(a: &Tensor) -> Result<Tensor> {
    let sh = a.shape();
    if sh.len() != 2 {
        return Err(Error::dimension(format!("transpose expects rank 2, got {sh:?}")));
    }
    let (m, n) = (sh[0], sh[1]);
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

fn conv_shapes(
    x: &[usize],
    w: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    if x.len() != 3 || w.len() != 4 {
        return Err(Error::dimension(format!(
            "conv2d expects x [C,H,W] and w [O,C,kh,kw], got {x:?} and {w:?}"
        )));
    }
    let (cin, h, wd) = (x[0], x[1], x[2]);
    let (cout, wcin, kh, kw) = (w[0], w[1], w[2], w[3]);
    if cin != wcin {
        return Err(Error::dimension(format!(
            "conv2d channel mismatch: input {cin}, kernel {wcin}"
        )));
    }
    if stride == 0 {
        return Err(Error::dimension("conv2d stride must be positive"));
    }
    if h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(Error::dimension("conv2d kernel larger than padded input"));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    Ok((cin, h, wd, cout, kh, kw, ho, wo))
}

fn conv2d_kernel(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (cin, h, wd, cout, kh, kw, ho, wo) = conv_shapes(x.shape(), w.shape(), stride, padding)?;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += xd[(ci * h + iy as usize) * wd + ix as usize]
                                * wdat[((co * cin + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(vec![cout, ho, wo], out)
}

fn conv_input_grad_kernel(
    g: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
    in_hw: (usize, usize),
) -> Result<Tensor> {
    let wsh = w.shape();
    if wsh.len() != 4 {
        return Err(Error::dimension("conv_input_grad expects rank-4 kernel"));
    }
    let (cout, cin, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
    let gsh = g.shape();
    if gsh.len() != 3 || gsh[0] != cout {
        return Err(Error::dimension(format!(
            "conv_input_grad gradient shape {gsh:?} incompatible with kernel {wsh:?}"
        )));
    }
    let (ho, wo) = (gsh[1], gsh[2]);
    let (h, wd) = in_hw;
    let gd = g.data();
    let wdat = w.data();
    let mut out = vec![0.0; cin * h * wd];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = gd[(co * ho + oy) * wo + ox];
                if gv == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            out[(ci * h + iy as usize) * wd + ix as usize] +=
                                gv * wdat[((co * cin + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cin, h, wd], out)
}

fn conv_weight_grad_kernel(
    g: &Tensor,
    x: &Tensor,
    stride: usize,
    padding: usize,
    kernel_hw: (usize, usize),
) -> Result<Tensor> {
    let xsh = x.shape();
    let gsh = g.shape();
    if xsh.len() != 3 || gsh.len() != 3 {
        return Err(Error::dimension("conv_weight_grad expects rank-3 tensors"));
    }
    let (cin, h, wd) = (xsh[0], xsh[1], xsh[2]);
    let (cout, ho, wo) = (gsh[0], gsh[1], gsh[2]);
    let (kh, kw) = kernel_hw;
    let gd = g.data();
    let xd = x.data();
    let mut out = vec![0.0; cout * cin * kh * kw];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = gd[(co * ho + oy) * wo + ox];
                if gv == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            out[((co * cin + ci) * kh + ky) * kw + kx] +=
                                gv * xd[(ci * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, cin, kh, kw], out)
}

fn pool_shapes(shape: &[usize], kernel: usize, truncate: bool) -> Result<(usize, usize, usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dimension(format!(
            "avg_pool2d expects rank >= 2, got {shape:?}"
        )));
    }
    if kernel == 0 {
        return Err(Error::dimension("avg_pool2d kernel must be positive"));
    }
    let lead: usize = shape[..shape.len() - 2].iter().product();
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    if !truncate && (h % kernel != 0 || w % kernel != 0) {
        return Err(Error::dimension(format!(
            "avg_pool2d kernel {kernel} does not divide extents {h}x{w}"
        )));
    }
    Ok((lead, h, w, h / kernel, w / kernel))
}

fn avg_pool_kernel(x: &Tensor, kernel: usize, truncate: bool) -> Result<Tensor> {
    let (lead, h, w, ho, wo) = pool_shapes(x.shape(), kernel, truncate)?;
    if ho == 0 || wo == 0 {
        return Err(Error::dimension("avg_pool2d output would be empty"));
    }
    let xd = x.data();
    let inv = 1.0 / (kernel * kernel) as Real;
    let mut out = vec![0.0; lead * ho * wo];
    for l in 0..lead {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        acc += xd[(l * h + oy * kernel + ky) * w + ox * kernel + kx];
                    }
                }
                out[(l * ho + oy) * wo + ox] = acc * inv;
            }
        }
    }
    let mut shape = x.shape()[..x.rank() - 2].to_vec();
    shape.push(ho);
    shape.push(wo);
    Tensor::new(shape, out)
}

fn avg_unpool_kernel(g: &Tensor, kernel: usize, out_hw: (usize, usize)) -> Result<Tensor> {
    let gsh = g.shape();
    if gsh.len() < 2 {
        return Err(Error::dimension("avg_unpool2d expects rank >= 2"));
    }
    let lead: usize = gsh[..gsh.len() - 2].iter().product();
    let (ho, wo) = (gsh[gsh.len() - 2], gsh[gsh.len() - 1]);
    let (h, w) = out_hw;
    if ho * kernel > h || wo * kernel > w {
        return Err(Error::dimension("avg_unpool2d target smaller than pooled grid"));
    }
    let gd = g.data();
    let inv = 1.0 / (kernel * kernel) as Real;
    let mut out = vec![0.0; lead * h * w];
    for l in 0..lead {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = gd[(l * ho + oy) * wo + ox] * inv;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        out[(l * h + oy * kernel + ky) * w + ox * kernel + kx] = gv;
                    }
                }
            }
        }
    }
    let mut shape = gsh[..gsh.len() - 2].to_vec();
    shape.push(h);
    shape.push(w);
    Tensor::new(shape, out)
}

fn sum_trailing_kernel(x: &Tensor, axes: usize) -> Result<Tensor> {
    let rank = x.rank();
    if axes == 0 || axes > rank {
        return Err(Error::dimension(format!(
            "sum_trailing over {axes} axes of rank {rank}"
        )));
    }
    let keep = &x.shape()[..rank - axes];
    let lead: usize = keep.iter().product();
    let block = x.numel() / lead.max(1);
    let xd = x.data();
    let data: Vec<Real> = (0..lead)
        .map(|l| xd[l * block..(l + 1) * block].iter().sum())
        .collect();
    Tensor::new(keep.to_vec(), data)
}

fn broadcast_kernel(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let block = operand_block(x.shape(), shape).ok_or_else(|| {
        Error::dimension(format!(
            "cannot broadcast {:?} to {:?} (trailing singletons only)",
            x.shape(),
            shape
        ))
    })?;
    let numel: usize = shape.iter().product::<usize>().max(1);
    let xd = x.data();
    let data: Vec<Real> = (0..numel).map(|i| xd[i / block]).collect();
    Tensor::new(shape.to_vec(), data)
}

fn max_trailing_kernel(x: &Tensor, axes: usize) -> Result<Tensor> {
    let rank = x.rank();
    if axes == 0 || axes > rank {
        return Err(Error::dimension(format!(
            "max_trailing over {axes} axes of rank {rank}"
        )));
    }
    let keep = &x.shape()[..rank - axes];
    let lead: usize = keep.iter().product::<usize>().max(1);
    let block = x.numel() / lead;
    if block == 0 {
        return Err(Error::dimension("max_trailing over empty block"));
    }
    let xd = x.data();
    let data: Vec<Real> = (0..lead)
        .map(|l| xd[l * block..(l + 1) * block].iter().cloned().fold(Real::NEG_INFINITY, Real::max))
        .collect();
    Tensor::new(keep.to_vec(), data)
}

fn max_mask_kernel(x: &Tensor, axes: usize) -> Result<Tensor> {
    let rank = x.rank();
    let keep = &x.shape()[..rank - axes];
    let lead: usize = keep.iter().product::<usize>().max(1);
    let block = x.numel() / lead;
    let xd = x.data();
    let mut data = vec![0.0; x.numel()];
    for l in 0..lead {
        let seg = &xd[l * block..(l + 1) * block];
        let mut best = 0;
        for (i, &v) in seg.iter().enumerate() {
            if v > seg[best] {
                best = i;
            }
        }
        data[l * block + best] = 1.0;
    }
    Tensor::new(x.shape().to_vec(), data)
}

fn spatial_hw(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dimension("need at least 2 spatial axes"));
    }
    Ok((shape[shape.len() - 2], shape[shape.len() - 1]))
}

fn kernel_hw(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::dimension("kernel must be rank 4"));
    }
    Ok((shape[2], shape[3]))
}
