use std::collections::{BTreeMap, HashMap};

use crate::autodiff::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations. Inputs always refer to earlier nodes, so insertion order
/// is a topological order.
#[derive(Debug, Clone)]
pub enum Op {
    Input(usize),
    Param(ParamId),
    Constant(Tensor),
    /// `a[..., k] · b[k, n]`, or `a[..., k] · b[n, k]ᵀ` when `trans_b`.
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    /// Per-batch `a[B, m, k] · b[B, k, n]` (or `b[B, n, k]ᵀ`).
    BatchMatMul { a: NodeId, b: NodeId, trans_b: bool },
    /// Adds a 1-D bias along the last axis. The only broadcasting op.
    AddBias { x: NodeId, bias: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// Softmax over the last axis.
    Softmax(NodeId),
    /// `x[B, C, H, W]`, `weight[O, C, kh, kw]`, `bias[O]`.
    Conv2d {
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    /// Keeps axis 0, flattens the rest.
    Flatten(NodeId),
    /// Concatenates along the last axis.
    Concat(Vec<NodeId>),
    /// `[B, T, D] -> [B, D]` at time step `t`.
    SelectTime { x: NodeId, t: usize },
    /// `[B, T, D] -> [B, D]`, mean over time.
    MeanTime(NodeId),
    /// Sum of all elements, shape `[1]`.
    Sum(NodeId),
    /// Mean softmax cross-entropy of `logits[B, C]` against class indices stored
    /// as `f64` in `targets[B]`. Shape `[1]`.
    CrossEntropy { logits: NodeId, targets: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::Flatten(_) => "flatten",
            Op::Concat(_) => "concat",
            Op::SelectTime { .. } => "select_time",
            Op::MeanTime(_) => "mean_time",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) => vec![],
            Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::Flatten(a)
            | Op::MeanTime(a)
            | Op::Sum(a) => vec![*a],
            Op::Conv2d {
                x, weight, bias, ..
            } => vec![*x, *weight, *bias],
            Op::Concat(v) => v.clone(),
            Op::SelectTime { x, .. } => vec![*x],
            Op::CrossEntropy { logits, targets } => vec![*logits, *targets],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// A DAG of primitive ops with a forward cache for reverse-mode differentiation.
///
/// Build with the op methods, mark the output with [`Graph::set_output`], then call
/// [`Graph::forward`] followed by [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    input_shapes: Vec<Vec<usize>>,
    output: Option<NodeId>,
    param_nodes: HashMap<ParamId, NodeId>,
    retained: Vec<NodeId>,
    values: Vec<Option<Tensor>>,
    conv_cols: HashMap<usize, Vec<f64>>,
    last_inputs: Option<Vec<Tensor>>,
    node_grads: HashMap<usize, Tensor>,
}

/// Gradients keyed by parameter id.
pub type Gradients = BTreeMap<ParamId, Tensor>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for i in op.inputs() {
            assert!(i.0 < self.nodes.len(), "node input refers to a later node");
        }
        self.nodes.push(Node { op, label: None });
        self.values.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Attaches a human-readable label used in error messages.
    pub fn label(&mut self, node: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[node.0].label = Some(label.into());
        node
    }

    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        let idx = self.input_shapes.len();
        self.input_shapes.push(shape.to_vec());
        self.push(Op::Input(idx))
    }

    /// Parameter reference. Repeated calls with the same id return the same node.
    pub fn param(&mut self, id: &str) -> NodeId {
        if let Some(&n) = self.param_nodes.get(id) {
            return n;
        }
        let n = self.push(Op::Param(id.to_string()));
        self.param_nodes.insert(id.to_string(), n);
        n
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant(t))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b, trans_b: false })
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b, trans_b: true })
    }

    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> NodeId {
        self.push(Op::BatchMatMul { a, b, trans_b })
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias { x, bias })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(a, c))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> NodeId {
        self.push(Op::Conv2d {
            x,
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn flatten(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Flatten(a))
    }

    pub fn concat(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::Concat(parts))
    }

    pub fn select_time(&mut self, x: NodeId, t: usize) -> NodeId {
        self.push(Op::SelectTime { x, t })
    }

    pub fn mean_time(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MeanTime(x))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::CrossEntropy { logits, targets })
    }

    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    /// Requests that `node`'s gradient be kept after [`Graph::backward`].
    pub fn retain_grad(&mut self, node: NodeId) {
        if !self.retained.contains(&node) {
            self.retained.push(node);
        }
    }

    pub fn input_shapes(&self) -> &[Vec<usize>] {
        &self.input_shapes
    }

    /// Cached forward value of any node.
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.values.get(node.0).and_then(Option::as_ref)
    }

    /// Gradient of a retained node from the last backward pass.
    pub fn node_grad(&self, node: NodeId) -> Option<&Tensor> {
        self.node_grads.get(&node.0)
    }

    fn shape_err(&self, node: usize, msg: impl Into<String>) -> Error {
        let n = &self.nodes[node];
        let msg = match &n.label {
            Some(l) => format!("[{l}] {}", msg.into()),
            None => msg.into(),
        };
        Error::Shape {
            node,
            op: n.op.name(),
            msg,
        }
    }

    /// Evaluates every node and returns the output value.
    pub fn forward(&mut self, inputs: &[Tensor], params: &ParamStore) -> Result<Tensor> {
        let out = self.output.ok_or(Error::NoOutput)?;
        if inputs.len() != self.input_shapes.len() {
            return Err(Error::InputCount {
                expected: self.input_shapes.len(),
                actual: inputs.len(),
            });
        }
        self.conv_cols.clear();
        self.node_grads.clear();
        for v in &mut self.values {
            *v = None;
        }
        for i in 0..self.nodes.len() {
            let v = self.eval_node(i, inputs, params)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            self.values[i] = Some(v);
        }
        self.last_inputs = Some(inputs.to_vec());
        Ok(self.values[out.0].clone().expect("output evaluated"))
    }

    fn val(&self, n: NodeId) -> &Tensor {
        self.values[n.0].as_ref().expect("input evaluated before use")
    }

    fn eval_node(&mut self, i: usize, inputs: &[Tensor], params: &ParamStore) -> Result<Tensor> {
        let op = self.nodes[i].op.clone();
        let t = match op {
            Op::Input(k) => {
                let x = &inputs[k];
                if x.shape() != self.input_shapes[k].as_slice() {
                    return Err(self.shape_err(
                        i,
                        format!(
                            "input {k} expected shape {:?}, got {:?}",
                            self.input_shapes[k],
                            x.shape()
                        ),
                    ));
                }
                x.clone()
            }
            Op::Param(id) => params.get(&id)?.clone(),
            Op::Constant(t) => t,
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.val(a), self.val(b));
                let k = *av.shape().last().unwrap();
                if bv.ndim() != 2 {
                    return Err(self.shape_err(i, format!("rhs must be 2-D, got {:?}", bv.shape())));
                }
                let (bk, n) = if trans_b {
                    (bv.shape()[1], bv.shape()[0])
                } else {
                    (bv.shape()[0], bv.shape()[1])
                };
                if bk != k {
                    return Err(self.shape_err(
                        i,
                        format!(
                            "inner dims differ: lhs {:?}, rhs {:?} (trans_b={trans_b})",
                            av.shape(),
                            bv.shape()
                        ),
                    ));
                }
                let m = av.len() / k;
                let mut out = vec![0.0; m * n];
                if trans_b {
                    kernels::gemm_nt_acc(&mut out, av.values(), bv.values(), m, k, n);
                } else {
                    kernels::gemm_nn_acc(&mut out, av.values(), bv.values(), m, k, n);
                }
                let mut shape = av.shape().to_vec();
                *shape.last_mut().unwrap() = n;
                Tensor::from_parts(shape, out)
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.val(a), self.val(b));
                if av.ndim() != 3 || bv.ndim() != 3 || av.shape()[0] != bv.shape()[0] {
                    return Err(self.shape_err(
                        i,
                        format!("expected [B,m,k] x [B,.,.], got {:?} x {:?}", av.shape(), bv.shape()),
                    ));
                }
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let (bk, n) = if trans_b {
                    (bv.shape()[2], bv.shape()[1])
                } else {
                    (bv.shape()[1], bv.shape()[2])
                };
                if bk != k {
                    return Err(self.shape_err(
                        i,
                        format!("inner dims differ: {:?} x {:?}", av.shape(), bv.shape()),
                    ));
                }
                let mut out = vec![0.0; bs * m * n];
                for s in 0..bs {
                    let o = &mut out[s * m * n..(s + 1) * m * n];
                    let aa = &av.values()[s * m * k..(s + 1) * m * k];
                    let bb = &bv.values()[s * k * n..(s + 1) * k * n];
                    if trans_b {
                        kernels::gemm_nt_acc(o, aa, bb, m, k, n);
                    } else {
                        kernels::gemm_nn_acc(o, aa, bb, m, k, n);
                    }
                }
                Tensor::from_parts(vec![bs, m, n], out)
            }
            Op::AddBias { x, bias } => {
                let (xv, bv) = (self.val(x), self.val(bias));
                let d = *xv.shape().last().unwrap();
                if bv.ndim() != 1 || bv.len() != d {
                    return Err(self.shape_err(
                        i,
                        format!("bias {:?} does not match last dim of {:?}", bv.shape(), xv.shape()),
                    ));
                }
                let mut out = xv.values().to_vec();
                for row in out.chunks_mut(d) {
                    for (o, b) in row.iter_mut().zip(bv.values()) {
                        *o += b;
                    }
                }
                Tensor::from_parts(xv.shape().to_vec(), out)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                if av.shape() != bv.shape() {
                    return Err(self.shape_err(
                        i,
                        format!("operand shapes differ: {:?} vs {:?}", av.shape(), bv.shape()),
                    ));
                }
                let f: fn(f64, f64) -> f64 = match self.nodes[i].op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let out = av.values().iter().zip(bv.values()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(av.shape().to_vec(), out)
            }
            Op::Scale(a, c) => map(self.val(a), |x| x * c),
            Op::AddScalar(a, c) => map(self.val(a), |x| x + c),
            Op::Sigmoid(a) => map(self.val(a), kernels::sigmoid),
            Op::Tanh(a) => map(self.val(a), f64::tanh),
            Op::Relu(a) => map(self.val(a), |x| if x > 0.0 { x } else { 0.0 }),
            Op::Softmax(a) => {
                let av = self.val(a);
                let d = *av.shape().last().unwrap();
                let mut out = av.values().to_vec();
                kernels::softmax_rows(&mut out, d);
                Tensor::from_parts(av.shape().to_vec(), out)
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (xv, wv, bv) = (self.val(x), self.val(weight), self.val(bias));
                if xv.ndim() != 4 || wv.ndim() != 4 {
                    return Err(self.shape_err(
                        i,
                        format!("expected 4-D input and weight, got {:?} and {:?}", xv.shape(), wv.shape()),
                    ));
                }
                let (bs, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let (o, wc, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
                if wc != c {
                    return Err(self.shape_err(
                        i,
                        format!("input has {c} channels, weight expects {wc}"),
                    ));
                }
                if bv.ndim() != 1 || bv.len() != o {
                    return Err(self.shape_err(i, format!("bias {:?} for {o} filters", bv.shape())));
                }
                if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
                    return Err(self.shape_err(i, "kernel larger than padded input or zero stride"));
                }
                let geom = ConvGeom {
                    channels: c,
                    height: h,
                    width: w,
                    kernel_h: kh,
                    kernel_w: kw,
                    stride,
                    padding,
                };
                let (oh, ow) = (geom.out_h(), geom.out_w());
                let p = oh * ow;
                let patch = geom.patch();
                let mut cols = vec![0.0; bs * patch * p];
                let mut out = vec![0.0; bs * o * p];
                let in_stride = c * h * w;
                for s in 0..bs {
                    let col = &mut cols[s * patch * p..(s + 1) * patch * p];
                    geom.im2col(&xv.values()[s * in_stride..(s + 1) * in_stride], col);
                    let dst = &mut out[s * o * p..(s + 1) * o * p];
                    for (f, row) in dst.chunks_mut(p).enumerate() {
                        row.fill(bv.values()[f]);
                    }
                    kernels::gemm_nn_acc(dst, wv.values(), col, o, patch, p);
                }
                self.conv_cols.insert(i, cols);
                Tensor::from_parts(vec![bs, o, oh, ow], out)
            }
            Op::Flatten(a) => {
                let av = self.val(a);
                let b = av.shape()[0];
                Tensor::from_parts(vec![b, av.len() / b], av.values().to_vec())
            }
            Op::Concat(parts) => {
                let first = self.val(parts[0]);
                let lead = &first.shape()[..first.ndim() - 1];
                let rows = numel(lead);
                let mut widths = Vec::with_capacity(parts.len());
                for &p in &parts {
                    let pv = self.val(p);
                    if &pv.shape()[..pv.ndim() - 1] != lead || pv.ndim() != first.ndim() {
                        return Err(self.shape_err(
                            i,
                            format!("part shapes differ: {:?} vs {:?}", first.shape(), pv.shape()),
                        ));
                    }
                    widths.push(*pv.shape().last().unwrap());
                }
                let total: usize = widths.iter().sum();
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for (&p, &w) in parts.iter().zip(&widths) {
                        out.extend_from_slice(&self.val(p).values()[r * w..(r + 1) * w]);
                    }
                }
                let mut shape = lead.to_vec();
                shape.push(total);
                Tensor::from_parts(shape, out)
            }
            Op::SelectTime { x, t } => {
                let xv = self.val(x);
                if xv.ndim() != 3 || t >= xv.shape()[1] {
                    return Err(self.shape_err(i, format!("time {t} out of range for {:?}", xv.shape())));
                }
                let (b, tt, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let mut out = Vec::with_capacity(b * d);
                for s in 0..b {
                    let base = (s * tt + t) * d;
                    out.extend_from_slice(&xv.values()[base..base + d]);
                }
                Tensor::from_parts(vec![b, d], out)
            }
            Op::MeanTime(x) => {
                let xv = self.val(x);
                if xv.ndim() != 3 {
                    return Err(self.shape_err(i, format!("expected [B,T,D], got {:?}", xv.shape())));
                }
                let (b, tt, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let mut out = vec![0.0; b * d];
                for s in 0..b {
                    for t in 0..tt {
                        let base = (s * tt + t) * d;
                        for j in 0..d {
                            out[s * d + j] += xv.values()[base + j];
                        }
                    }
                }
                let inv = 1.0 / tt as f64;
                out.iter_mut().for_each(|v| *v *= inv);
                Tensor::from_parts(vec![b, d], out)
            }
            Op::Sum(a) => Tensor::scalar(self.val(a).values().iter().sum()),
            Op::CrossEntropy { logits, targets } => {
                let (lv, tv) = (self.val(logits), self.val(targets));
                if lv.ndim() != 2 || tv.len() != lv.shape()[0] {
                    return Err(self.shape_err(
                        i,
                        format!("logits {:?} vs targets {:?}", lv.shape(), tv.shape()),
                    ));
                }
                let (b, c) = (lv.shape()[0], lv.shape()[1]);
                let mut probs = lv.values().to_vec();
                kernels::softmax_rows(&mut probs, c);
                let mut loss = 0.0;
                for s in 0..b {
                    let y = class_index(tv.values()[s], c)
                        .ok_or_else(|| self.shape_err(i, format!("target {} not a class index", tv.values()[s])))?;
                    // log-sum-exp form for the log-probability
                    let row = &lv.values()[s * c..(s + 1) * c];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    loss += lse - row[y];
                }
                Tensor::scalar(loss / b as f64)
            }
        };
        Ok(t)
    }

    fn requires_grad(&self, params: &ParamStore) -> Vec<bool> {
        let mut req = vec![false; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            req[i] = self.retained.contains(&NodeId(i))
                || match &n.op {
                    Op::Param(id) => params.is_trainable(id),
                    Op::Input(_) | Op::Constant(_) => false,
                    Op::CrossEntropy { logits, .. } => req[logits.0],
                    op => op.inputs().iter().any(|j| req[j.0]),
                };
        }
        req
    }

    /// Reverse pass from the scalar output. Returns one gradient per trainable
    /// parameter referenced by the graph; frozen parameters get no entry.
    pub fn backward(&mut self, params: &ParamStore) -> Result<Gradients> {
        let out = self.output.ok_or(Error::NoOutput)?;
        let out_val = self.values[out.0].as_ref().ok_or(Error::BackwardBeforeForward)?;
        if out_val.len() != 1 {
            return Err(Error::NotScalar(out_val.shape().to_vec()));
        }
        self.backward_seeded(params, vec![1.0])
    }

    fn backward_seeded(&mut self, params: &ParamStore, seed: Vec<f64>) -> Result<Gradients> {
        let out = self.output.ok_or(Error::NoOutput)?;
        if self.values.iter().any(Option::is_none) {
            return Err(Error::BackwardBeforeForward);
        }
        let req = self.requires_grad(params);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if req[out.0] {
            grads[out.0] = Some(seed);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &req, &mut grads)?;
            grads[i] = Some(g);
        }
        self.node_grads.clear();
        for r in &self.retained {
            if let Some(g) = &grads[r.0] {
                let shape = self.values[r.0].as_ref().unwrap().shape().to_vec();
                self.node_grads.insert(r.0, Tensor::from_parts(shape, g.clone()));
            }
        }
        let mut result = Gradients::new();
        for (id, node) in &self.param_nodes {
            if !params.is_trainable(id) {
                continue;
            }
            let shape = self.values[node.0].as_ref().unwrap().shape().to_vec();
            let g = grads[node.0]
                .take()
                .unwrap_or_else(|| vec![0.0; numel(&shape)]);
            result.insert(id.clone(), Tensor::from_parts(shape, g));
        }
        Ok(result)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[f64],
        req: &[bool],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let y = self.values[i].as_ref().unwrap();
        let acc = |grads: &mut [Option<Vec<f64>>], n: NodeId, f: &dyn Fn(&mut [f64])| {
            if !req[n.0] {
                return;
            }
            let len = self.values[n.0].as_ref().unwrap().len();
            let slot = grads[n.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &self.nodes[i].op {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let k = *av.shape().last().unwrap();
                let m = av.len() / k;
                let n = y.shape().last().copied().unwrap();
                acc(grads, *a, &|da| {
                    if *trans_b {
                        // y = a bᵀ, b: [n,k]
                        kernels::gemm_nn_acc(da, g, bv.values(), m, n, k);
                    } else {
                        kernels::gemm_nt_acc(da, g, bv.values(), m, n, k);
                    }
                });
                acc(grads, *b, &|db| {
                    if *trans_b {
                        kernels::gemm_tn_acc(db, g, av.values(), n, m, k);
                    } else {
                        kernels::gemm_tn_acc(db, av.values(), g, k, m, n);
                    }
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = y.shape()[2];
                acc(grads, *a, &|da| {
                    for s in 0..bs {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bb = &bv.values()[s * k * n..(s + 1) * k * n];
                        let d = &mut da[s * m * k..(s + 1) * m * k];
                        if *trans_b {
                            kernels::gemm_nn_acc(d, gs, bb, m, n, k);
                        } else {
                            kernels::gemm_nt_acc(d, gs, bb, m, n, k);
                        }
                    }
                });
                acc(grads, *b, &|db| {
                    for s in 0..bs {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let aa = &av.values()[s * m * k..(s + 1) * m * k];
                        let d = &mut db[s * k * n..(s + 1) * k * n];
                        if *trans_b {
                            kernels::gemm_tn_acc(d, gs, aa, n, m, k);
                        } else {
                            kernels::gemm_tn_acc(d, aa, gs, k, m, n);
                        }
                    }
                });
            }
            Op::AddBias { x, bias } => {
                acc(grads, *x, &|dx| add_into(dx, g));
                let d = self.val(*bias).len();
                acc(grads, *bias, &|db| {
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(grads, *a, &|d| add_into(d, g));
                acc(grads, *b, &|d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &|d| add_into(d, g));
                acc(grads, *b, &|d| {
                    for (x, gv) in d.iter_mut().zip(g) {
                        *x -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(grads, *a, &|d| {
                    for ((x, gv), o) in d.iter_mut().zip(g).zip(bv.values()) {
                        *x += gv * o;
                    }
                });
                acc(grads, *b, &|d| {
                    for ((x, gv), o) in d.iter_mut().zip(g).zip(av.values()) {
                        *x += gv * o;
                    }
                });
            }
            Op::Scale(a, c) => acc(grads, *a, &|d| {
                for (x, gv) in d.iter_mut().zip(g) {
                    *x += gv * c;
                }
            }),
            Op::AddScalar(a, _) => acc(grads, *a, &|d| add_into(d, g)),
            Op::Sigmoid(a) => acc(grads, *a, &|d| {
                for ((x, gv), s) in d.iter_mut().zip(g).zip(y.values()) {
                    *x += gv * s * (1.0 - s);
                }
            }),
            Op::Tanh(a) => acc(grads, *a, &|d| {
                for ((x, gv), t) in d.iter_mut().zip(g).zip(y.values()) {
                    *x += gv * (1.0 - t * t);
                }
            }),
            Op::Relu(a) => {
                let av = self.val(*a);
                acc(grads, *a, &|d| {
                    for ((x, gv), v) in d.iter_mut().zip(g).zip(av.values()) {
                        if *v > 0.0 {
                            *x += gv;
                        }
                    }
                })
            }
            Op::Softmax(a) => {
                let n = *y.shape().last().unwrap();
                acc(grads, *a, &|d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.values().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((x, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *x += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (xv, wv) = (self.val(*x), self.val(*weight));
                let (bs, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let (o, _, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
                let geom = ConvGeom {
                    channels: c,
                    height: h,
                    width: w,
                    kernel_h: kh,
                    kernel_w: kw,
                    stride: *stride,
                    padding: *padding,
                };
                let p = geom.out_h() * geom.out_w();
                let patch = geom.patch();
                let cols = &self.conv_cols[&i];
                acc(grads, *bias, &|db| {
                    for s in 0..bs {
                        for f in 0..o {
                            db[f] += g[(s * o + f) * p..(s * o + f + 1) * p].iter().sum::<f64>();
                        }
                    }
                });
                acc(grads, *weight, &|dw| {
                    for s in 0..bs {
                        let gs = &g[s * o * p..(s + 1) * o * p];
                        kernels::gemm_nt_acc(dw, gs, &cols[s * patch * p..(s + 1) * patch * p], o, p, patch);
                    }
                });
                acc(grads, *x, &|dx| {
                    let mut dcol = vec![0.0; patch * p];
                    let in_stride = c * h * w;
                    for s in 0..bs {
                        dcol.fill(0.0);
                        let gs = &g[s * o * p..(s + 1) * o * p];
                        kernels::gemm_tn_acc(&mut dcol, wv.values(), gs, patch, o, p);
                        geom.col2im_acc(&dcol, &mut dx[s * in_stride..(s + 1) * in_stride]);
                    }
                });
            }
            Op::Flatten(a) => acc(grads, *a, &|d| add_into(d, g)),
            Op::Concat(parts) => {
                let total = *y.shape().last().unwrap();
                let rows = y.len() / total;
                let mut off = 0;
                for &p in parts {
                    let w = *self.val(p).shape().last().unwrap();
                    acc(grads, p, &|d| {
                        for r in 0..rows {
                            add_into(&mut d[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SelectTime { x, t } => {
                let xv = self.val(*x);
                let (b, tt, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                acc(grads, *x, &|dx| {
                    for s in 0..b {
                        let base = (s * tt + t) * d;
                        add_into(&mut dx[base..base + d], &g[s * d..(s + 1) * d]);
                    }
                });
            }
            Op::MeanTime(x) => {
                let xv = self.val(*x);
                let (b, tt, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let inv = 1.0 / tt as f64;
                acc(grads, *x, &|dx| {
                    for s in 0..b {
                        for t in 0..tt {
                            let base = (s * tt + t) * d;
                            for j in 0..d {
                                dx[base + j] += g[s * d + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => acc(grads, *a, &|d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::CrossEntropy { logits, targets } => {
                let (lv, tv) = (self.val(*logits), self.val(*targets));
                let (b, c) = (lv.shape()[0], lv.shape()[1]);
                acc(grads, *logits, &|d| {
                    let mut probs = lv.values().to_vec();
                    kernels::softmax_rows(&mut probs, c);
                    let scale = g[0] / b as f64;
                    for s in 0..b {
                        let yi = class_index(tv.values()[s], c).unwrap();
                        for j in 0..c {
                            let onehot = if j == yi { 1.0 } else { 0.0 };
                            d[s * c + j] += scale * (probs[s * c + j] - onehot);
                        }
                    }
                });
            }
        }
        Ok(())
    }

    /// Central-difference gradient check over every trainable element.
    ///
    /// Uses the inputs of the most recent forward pass. Returns the maximum of
    /// `|analytic - numeric| / max(1, |numeric|)`.
    pub fn finite_diff_check(&mut self, params: &ParamStore, eps: f64) -> Result<f64> {
        let inputs = self.last_inputs.clone().ok_or(Error::BackwardBeforeForward)?;
        let y = self.forward(&inputs, params)?;
        if y.len() != 1 {
            return Err(Error::NotScalar(y.shape().to_vec()));
        }
        let analytic = self.backward(params)?;
        let mut probe = params.clone();
        let mut worst: f64 = 0.0;
        for (id, grad) in &analytic {
            let mask = params.mask(id).cloned().expect("gradient only for trainable params");
            for e in 0..grad.len() {
                if !mask.allows(e) {
                    continue;
                }
                let orig = params.get(id)?.values()[e];
                probe.get_mut(id)?.values_mut()[e] = orig + eps;
                let plus = self.forward(&inputs, &probe)?.values()[0];
                probe.get_mut(id)?.values_mut()[e] = orig - eps;
                let minus = self.forward(&inputs, &probe)?.values()[0];
                probe.get_mut(id)?.values_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let err = (grad.values()[e] - numeric).abs() / numeric.abs().max(1.0);
                worst = worst.max(err);
            }
        }
        // leave the cache consistent with the unperturbed parameters
        self.forward(&inputs, params)?;
        Ok(worst)
    }
}

/// Free-function forms mirroring the graph methods.
pub fn forward(graph: &mut Graph, inputs: &[Tensor], params: &ParamStore) -> Result<Tensor> {
    graph.forward(inputs, params)
}

pub fn backward(graph: &mut Graph, params: &ParamStore) -> Result<Gradients> {
    graph.backward(params)
}

pub fn finite_diff_check(graph: &mut Graph, params: &ParamStore, eps: f64) -> Result<f64> {
    graph.finite_diff_check(params, eps)
}

fn class_index(v: f64, classes: usize) -> Option<usize> {
    if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
        Some(v as usize)
    } else {
        None
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.values().iter().map(|&v| f(v)).collect())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
