//! Reference-counted tensors that record the ops producing them.
//!
//! A [`Tensor`] is immutable. When any input of an op requires a gradient
//! the output keeps handles to its inputs, so the computation graph is the
//! set of tensors reachable from a loss. [`Tensor::backward`] sorts that set
//! topologically and runs each op's adjoint once, in reverse order.
//! Tensors built from inputs that need no gradient drop their history, so
//! inference holds only live intermediates.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::array::{
    broadcast_zip, gemm, log_softmax_row, reduce_to_shape, sigmoid, softmax_row, Array, MatView,
};
use super::params::ParamId;
use crate::error::{Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Closed set of differentiable operations.
#[derive(Clone, Debug)]
pub enum Op {
    Add,
    Mul,
    /// `[.., m, k] x [k, n]` or batched `[b.., m, k] x [b.., k, n]`.
    MatMul,
    /// Swaps the last two axes.
    Transpose,
    Reshape(Vec<usize>),
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Concat {
        axis: usize,
    },
    Softmax,
    LogSoftmax,
    Sigmoid,
    Swish,
    Tanh,
    /// Inputs: x, gain, bias; normalizes the last axis.
    LayerNorm {
        eps: f64,
    },
    /// Inputs: x `[.., n, c]`, kernel `[c, k]` with odd k; zero "same" padding.
    DepthwiseConv1d,
    /// Input: table `[v, d]`; output `[shape.., d]`.
    Embedding {
        ids: Rc<Vec<usize>>,
        shape: Vec<usize>,
    },
    /// Positions where `mask` is true are replaced by `value`.
    MaskedFill {
        mask: Rc<Vec<bool>>,
        value: f64,
    },
    Sum {
        axis: Option<usize>,
    },
    Mean {
        axis: Option<usize>,
    },
    /// A scalar function of one input whose Jacobian was computed alongside
    /// its value (used by the CTC losses).
    External {
        name: &'static str,
        jacobian: Rc<Array>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Sigmoid => "sigmoid",
            Op::Swish => "swish",
            Op::Tanh => "tanh",
            Op::LayerNorm { .. } => "layer_norm",
            Op::DepthwiseConv1d => "depthwise_conv1d",
            Op::Embedding { .. } => "embedding",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::External { name, .. } => name,
        }
    }
}

enum Origin {
    Leaf { param: Option<ParamId> },
    Op { op: Op, inputs: Vec<Tensor> },
}

struct Node {
    id: usize,
    value: Array,
    requires_grad: bool,
    origin: Origin,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn leaf(value: Array, requires_grad: bool, param: Option<ParamId>) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            origin: Origin::Leaf { param },
        }))
    }

    /// A constant that never receives gradient.
    pub fn constant(value: Array) -> Self {
        Self::leaf(value, false, None)
    }

    /// A free leaf that accumulates gradient (used for inputs under test).
    pub fn variable(value: Array) -> Self {
        Self::leaf(value, true, None)
    }

    pub(crate) fn parameter(value: Array, id: ParamId, requires_grad: bool) -> Self {
        Self::leaf(value, requires_grad, Some(id))
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Array::scalar(value))
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Ok(Self::constant(Array::new(shape, data)?))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.value.data()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn param_id(&self) -> Option<ParamId> {
        match &self.0.origin {
            Origin::Leaf { param } => *param,
            Origin::Op { .. } => None,
        }
    }

    /// Runs `op` on `inputs`, recording it when any input needs a gradient.
    pub fn apply(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        let values: Vec<&Array> = inputs.iter().map(|t| t.value()).collect();
        let value = forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let origin = if requires_grad {
            Origin::Op {
                op,
                inputs: inputs.iter().map(|&t| t.clone()).collect(),
            }
        } else {
            Origin::Leaf { param: None }
        };
        Ok(Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            origin,
        })))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        Self::apply(Op::Add, &[self, other])
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        Self::apply(Op::Mul, &[self, other])
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.mul(&Tensor::scalar(c))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.scale(-1.0)?)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        Self::apply(Op::MatMul, &[self, other])
    }

    pub fn transpose(&self) -> Result<Tensor> {
        Self::apply(Op::Transpose, &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Self::apply(Op::Reshape(shape.to_vec()), &[self])
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        Self::apply(Op::Slice { axis, start, end }, &[self])
    }

    /// Slice along the last axis.
    pub fn slice_last(&self, start: usize, end: usize) -> Result<Tensor> {
        let axis = self.shape().len().saturating_sub(1);
        self.slice(axis, start, end)
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        Self::apply(Op::Concat { axis }, parts)
    }

    pub fn softmax(&self) -> Result<Tensor> {
        Self::apply(Op::Softmax, &[self])
    }

    pub fn log_softmax(&self) -> Result<Tensor> {
        Self::apply(Op::LogSoftmax, &[self])
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        Self::apply(Op::Sigmoid, &[self])
    }

    pub fn swish(&self) -> Result<Tensor> {
        Self::apply(Op::Swish, &[self])
    }

    pub fn tanh(&self) -> Result<Tensor> {
        Self::apply(Op::Tanh, &[self])
    }

    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        Self::apply(Op::LayerNorm { eps }, &[self, gain, bias])
    }

    pub fn depthwise_conv1d(&self, kernel: &Tensor) -> Result<Tensor> {
        Self::apply(Op::DepthwiseConv1d, &[self, kernel])
    }

    pub fn embedding(table: &Tensor, ids: &[usize], shape: &[usize]) -> Result<Tensor> {
        Self::apply(
            Op::Embedding {
                ids: Rc::new(ids.to_vec()),
                shape: shape.to_vec(),
            },
            &[table],
        )
    }

    pub fn masked_fill(&self, mask: Rc<Vec<bool>>, value: f64) -> Result<Tensor> {
        Self::apply(Op::MaskedFill { mask, value }, &[self])
    }

    pub fn sum(&self) -> Result<Tensor> {
        Self::apply(Op::Sum { axis: None }, &[self])
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        Self::apply(Op::Sum { axis: Some(axis) }, &[self])
    }

    pub fn mean(&self) -> Result<Tensor> {
        Self::apply(Op::Mean { axis: None }, &[self])
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        Self::apply(Op::Mean { axis: Some(axis) }, &[self])
    }

    pub fn external(
        &self,
        name: &'static str,
        value: f64,
        jacobian: Array,
    ) -> Result<Tensor> {
        if jacobian.shape() != self.shape() {
            return Err(Error::dim(
                name,
                format!("jacobian {:?} vs input {:?}", jacobian.shape(), self.shape()),
            ));
        }
        let requires_grad = self.requires_grad();
        let origin = if requires_grad {
            Origin::Op {
                op: Op::External {
                    name,
                    jacobian: Rc::new(jacobian),
                },
                inputs: vec![self.clone()],
            }
        } else {
            Origin::Leaf { param: None }
        };
        Ok(Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value: Array::scalar(value),
            requires_grad,
            origin,
        })))
    }

    /// Reverse-mode gradients of this scalar with respect to every reachable
    /// tensor that requires a gradient.
    pub fn backward(&self) -> Result<Gradients> {
        if self.value().len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.value().is_finite() {
            return Err(Error::Numerical(format!(
                "loss is {} (trace: {})",
                self.item(),
                self.trace()
            )));
        }
        let graph = Graph::from_root(self);
        let mut grads: HashMap<usize, Array> = HashMap::new();
        let mut leaves: HashMap<usize, Array> = HashMap::new();
        let mut params: HashMap<ParamId, Array> = HashMap::new();
        grads.insert(self.id(), Array::full(self.shape(), 1.0));
        for node in graph.nodes.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.origin {
                Origin::Leaf { param } => {
                    if let Some(pid) = param {
                        match params.get_mut(pid) {
                            Some(acc) => acc.add_assign(&g),
                            None => {
                                params.insert(*pid, g.clone());
                            }
                        }
                    }
                    leaves.insert(node.id(), g);
                }
                Origin::Op { op, inputs } => {
                    let values: Vec<&Array> = inputs.iter().map(|t| t.value()).collect();
                    let input_grads = adjoint(op, &values, node.value(), &g)?;
                    for (input, ig) in inputs.iter().zip(input_grads) {
                        if !input.requires_grad() {
                            continue;
                        }
                        if let Some(ig) = ig {
                            match grads.get_mut(&input.id()) {
                                Some(acc) => acc.add_assign(&ig),
                                None => {
                                    grads.insert(input.id(), ig);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { leaves, params })
    }

    /// Short description of the op chain that produced this tensor.
    pub fn trace(&self) -> String {
        let graph = Graph::from_root(self);
        let ops: Vec<&str> = graph
            .nodes
            .iter()
            .filter_map(|n| match &n.0.origin {
                Origin::Op { op, .. } => Some(op.name()),
                Origin::Leaf { .. } => None,
            })
            .collect();
        if ops.len() > 12 {
            format!("{} ... {}", ops[..6].join(" > "), ops[ops.len() - 6..].join(" > "))
        } else {
            ops.join(" > ")
        }
    }
}

/// Tensors reachable from a root through recorded ops, in topological order
/// (inputs before outputs).
pub struct Graph {
    nodes: Vec<Tensor>,
}

impl Graph {
    pub fn from_root(root: &Tensor) -> Self {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // Iterative post-order DFS.
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Origin::Op { inputs, .. } = &t.0.origin {
                for input in inputs.iter().rev() {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        Graph { nodes: order }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.0.origin {
                Origin::Op { op, .. } => Some(op.name()),
                Origin::Leaf { .. } => None,
            })
            .collect()
    }
}

/// Result of a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Array>,
    params: HashMap<ParamId, Array>,
}

impl Gradients {
    /// Gradient for a leaf tensor; zeros when the loss does not reach it.
    pub fn wrt(&self, t: &Tensor) -> Array {
        self.leaves
            .get(&t.id())
            .cloned()
            .unwrap_or_else(|| Array::zeros(t.shape()))
    }

    pub fn param(&self, id: ParamId) -> Option<&Array> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Array)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

fn check_rank(op: &'static str, a: &Array, min: usize) -> Result<()> {
    if a.rank() < min {
        return Err(Error::dim(op, format!("needs rank >= {min}, got {:?}", a.shape())));
    }
    Ok(())
}

fn forward(op: &Op, x: &[&Array]) -> Result<Array> {
    let name = op.name();
    match op {
        Op::Add => broadcast_zip(name, x[0], x[1], |a, b| a + b),
        Op::Mul => broadcast_zip(name, x[0], x[1], |a, b| a * b),
        Op::MatMul => matmul(x[0], x[1]),
        Op::Transpose => {
            check_rank(name, x[0], 2)?;
            Ok(transpose_last(x[0]))
        }
        Op::Reshape(shape) => x[0].clone().reshaped(shape.clone()),
        Op::Slice { axis, start, end } => slice(x[0], *axis, *start, *end),
        Op::Concat { axis } => concat(x, *axis),
        Op::Softmax => Ok(rowwise(x[0], softmax_row)),
        Op::LogSoftmax => Ok(rowwise(x[0], log_softmax_row)),
        Op::Sigmoid => Ok(x[0].map(sigmoid)),
        Op::Swish => Ok(x[0].map(|v| v * sigmoid(v))),
        Op::Tanh => Ok(x[0].map(f64::tanh)),
        Op::LayerNorm { eps } => layer_norm(x[0], x[1], x[2], *eps),
        Op::DepthwiseConv1d => depthwise_conv(x[0], x[1]),
        Op::Embedding { ids, shape } => embedding(x[0], ids, shape),
        Op::MaskedFill { mask, value } => {
            if mask.len() != x[0].len() {
                return Err(Error::dim(
                    name,
                    format!("mask has {} entries for shape {:?}", mask.len(), x[0].shape()),
                ));
            }
            let mut out = x[0].clone();
            for (v, &m) in out.data_mut().iter_mut().zip(mask.iter()) {
                if m {
                    *v = *value;
                }
            }
            Ok(out)
        }
        Op::Sum { axis } => reduce(x[0], *axis, false),
        Op::Mean { axis } => reduce(x[0], *axis, true),
        Op::External { .. } => Err(Error::Contract(
            "external ops are built with Tensor::external".into(),
        )),
    }
}

/// Gradients of the inputs given the output gradient `g`.
fn adjoint(op: &Op, x: &[&Array], y: &Array, g: &Array) -> Result<Vec<Option<Array>>> {
    Ok(match op {
        Op::Add => vec![
            Some(reduce_to_shape(g, x[0].shape())),
            Some(reduce_to_shape(g, x[1].shape())),
        ],
        Op::Mul => {
            let ga = broadcast_zip("mul", g, x[1], |a, b| a * b)?;
            let gb = broadcast_zip("mul", g, x[0], |a, b| a * b)?;
            vec![
                Some(reduce_to_shape(&ga, x[0].shape())),
                Some(reduce_to_shape(&gb, x[1].shape())),
            ]
        }
        Op::MatMul => {
            let (ga, gb) = matmul_adjoint(x[0], x[1], g);
            vec![Some(ga), Some(gb)]
        }
        Op::Transpose => vec![Some(transpose_last(g))],
        Op::Reshape(_) => vec![Some(g.clone().reshaped(x[0].shape().to_vec())?)],
        Op::Slice { axis, start, .. } => {
            let mut out = Array::zeros(x[0].shape());
            scatter_axis(&mut out, g, *axis, *start);
            vec![Some(out)]
        }
        Op::Concat { axis } => {
            let mut offset = 0;
            x.iter()
                .map(|xi| {
                    let len = xi.shape()[*axis];
                    let part = slice(g, *axis, offset, offset + len);
                    offset += len;
                    part.map(Some)
                })
                .collect::<Result<Vec<_>>>()?
        }
        Op::Softmax => {
            let w = y.last_dim();
            let mut out = Array::zeros(y.shape());
            let od = out.data_mut();
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = g.row(r);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..w {
                    od[r * w + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(out)]
        }
        Op::LogSoftmax => {
            let w = y.last_dim();
            let mut out = Array::zeros(y.shape());
            let od = out.data_mut();
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = g.row(r);
                let s: f64 = gr.iter().sum();
                for j in 0..w {
                    od[r * w + j] = gr[j] - yr[j].exp() * s;
                }
            }
            vec![Some(out)]
        }
        Op::Sigmoid => vec![Some(broadcast_zip("sigmoid", g, y, |g, s| g * s * (1.0 - s))?)],
        Op::Swish => vec![Some(broadcast_zip("swish", g, x[0], |g, v| {
            let s = sigmoid(v);
            g * (s + v * s * (1.0 - s))
        })?)],
        Op::Tanh => vec![Some(broadcast_zip("tanh", g, y, |g, t| g * (1.0 - t * t))?)],
        Op::LayerNorm { eps } => {
            let (gx, gg, gb) = layer_norm_adjoint(x[0], x[1], g, *eps);
            vec![Some(gx), Some(gg), Some(gb)]
        }
        Op::DepthwiseConv1d => {
            let (gx, gk) = depthwise_conv_adjoint(x[0], x[1], g);
            vec![Some(gx), Some(gk)]
        }
        Op::Embedding { ids, .. } => {
            let d = x[0].last_dim();
            let mut out = Array::zeros(x[0].shape());
            let od = out.data_mut();
            for (i, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    od[id * d + j] += g.data()[i * d + j];
                }
            }
            vec![Some(out)]
        }
        Op::MaskedFill { mask, .. } => {
            let mut out = g.clone();
            for (v, &m) in out.data_mut().iter_mut().zip(mask.iter()) {
                if m {
                    *v = 0.0;
                }
            }
            vec![Some(out)]
        }
        Op::Sum { axis } => vec![Some(expand_reduced(g, x[0].shape(), *axis, 1.0))],
        Op::Mean { axis } => {
            let n = match axis {
                Some(a) => x[0].shape()[*a],
                None => x[0].len(),
            };
            vec![Some(expand_reduced(g, x[0].shape(), *axis, 1.0 / n as f64))]
        }
        Op::External { jacobian, .. } => {
            let s = g.item();
            vec![Some(jacobian.map(|j| j * s))]
        }
    })
}

fn rowwise(x: &Array, f: fn(&[f64], &mut [f64])) -> Array {
    let w = x.last_dim();
    let mut out = Array::zeros(x.shape());
    let od = out.data_mut();
    for r in 0..x.rows() {
        f(x.row(r), &mut od[r * w..(r + 1) * w]);
    }
    out
}

fn transpose_last(x: &Array) -> Array {
    let s = x.shape();
    let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = x.len() / (m * n).max(1);
    let mut shape = s.to_vec();
    let r = shape.len();
    shape.swap(r - 2, r - 1);
    let mut data = vec![0.0; x.len()];
    let xd = x.data();
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                data[base + j * m + i] = xd[base + i * n + j];
            }
        }
    }
    Array::from_parts(shape, data)
}

fn matmul(a: &Array, b: &Array) -> Result<Array> {
    check_rank("matmul", a, 2)?;
    check_rank("matmul", b, 2)?;
    let (sa, sb) = (a.shape(), b.shape());
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("contraction axis: {sa:?} x {sb:?} ({k} vs {k2})"),
        ));
    }
    let mut shape = sa[..sa.len() - 1].to_vec();
    shape.push(n);
    if sb.len() == 2 {
        let rows = a.len() / k.max(1);
        let mut out = vec![0.0; rows * n];
        gemm(MatView::new(a.data(), rows, k), MatView::new(b.data(), k, n), &mut out);
        return Ok(Array::from_parts(shape, out));
    }
    if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(Error::dim(
            "matmul",
            format!("batch axes differ: {sa:?} x {sb:?}"),
        ));
    }
    let batch = a.len() / (m * k).max(1);
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        gemm(
            MatView::new(&a.data()[i * m * k..(i + 1) * m * k], m, k),
            MatView::new(&b.data()[i * k * n..(i + 1) * k * n], k, n),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    Ok(Array::from_parts(shape, out))
}

fn matmul_adjoint(a: &Array, b: &Array, g: &Array) -> (Array, Array) {
    let (sa, sb) = (a.shape(), b.shape());
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let n = sb[sb.len() - 1];
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    if sb.len() == 2 {
        let rows = a.len() / k.max(1);
        let gv = MatView::new(g.data(), rows, n);
        gemm(gv, MatView::new(b.data(), k, n).t(), &mut ga);
        gemm(MatView::new(a.data(), rows, k).t(), gv, &mut gb);
    } else {
        let batch = a.len() / (m * k).max(1);
        for i in 0..batch {
            let av = MatView::new(&a.data()[i * m * k..(i + 1) * m * k], m, k);
            let bv = MatView::new(&b.data()[i * k * n..(i + 1) * k * n], k, n);
            let gv = MatView::new(&g.data()[i * m * n..(i + 1) * m * n], m, n);
            gemm(gv, bv.t(), &mut ga[i * m * k..(i + 1) * m * k]);
            gemm(av.t(), gv, &mut gb[i * k * n..(i + 1) * k * n]);
        }
    }
    (
        Array::from_parts(sa.to_vec(), ga),
        Array::from_parts(sb.to_vec(), gb),
    )
}

/// (outer, axis length, inner) decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn slice(x: &Array, axis: usize, start: usize, end: usize) -> Result<Array> {
    if axis >= x.rank() || start > end || end > x.shape()[axis] {
        return Err(Error::dim(
            "slice",
            format!("axis {axis} range {start}..{end} outside {:?}", x.shape()),
        ));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let w = end - start;
    let mut data = Vec::with_capacity(outer * w * inner);
    for o in 0..outer {
        let base = o * len * inner;
        data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = w;
    Ok(Array::from_parts(shape, data))
}

fn scatter_axis(out: &mut Array, part: &Array, axis: usize, start: usize) {
    let (outer, len, inner) = split_axis(out.shape(), axis);
    let w = part.shape()[axis];
    let od = out.data_mut();
    for o in 0..outer {
        let base = o * len * inner + start * inner;
        let src = &part.data()[o * w * inner..(o + 1) * w * inner];
        for (d, s) in od[base..base + w * inner].iter_mut().zip(src) {
            *d += s;
        }
    }
}

fn concat(parts: &[&Array], axis: usize) -> Result<Array> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat", "no inputs"))?;
    if axis >= first.rank() {
        return Err(Error::dim("concat", format!("axis {axis} for {:?}", first.shape())));
    }
    let mut shape = first.shape().to_vec();
    let mut total = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::dim(
                "concat",
                format!("axis {axis}: {:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
        total += p.shape()[axis];
    }
    shape[axis] = total;
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let w = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
        }
    }
    Ok(Array::from_parts(shape, data))
}

fn layer_norm(x: &Array, gain: &Array, bias: &Array, eps: f64) -> Result<Array> {
    let d = x.last_dim();
    if gain.len() != d || bias.len() != d {
        return Err(Error::dim(
            "layer_norm",
            format!("last axis {d} vs gain {:?} bias {:?}", gain.shape(), bias.shape()),
        ));
    }
    let mut out = Array::zeros(x.shape());
    let od = out.data_mut();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            od[r * d + j] = (row[j] - mean) * inv * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(out)
}

fn layer_norm_adjoint(x: &Array, gain: &Array, g: &Array, eps: f64) -> (Array, Array, Array) {
    let d = x.last_dim();
    let mut gx = Array::zeros(x.shape());
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let gxd = gx.data_mut();
    let mut xhat = vec![0.0; d];
    let mut gh = vec![0.0; d];
    for r in 0..x.rows() {
        let row = x.row(r);
        let gr = g.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            xhat[j] = (row[j] - mean) * inv;
            gh[j] = gr[j] * gain.data()[j];
            gg[j] += gr[j] * xhat[j];
            gb[j] += gr[j];
        }
        let mean_gh = gh.iter().sum::<f64>() / d as f64;
        let mean_ghx = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            gxd[r * d + j] = inv * (gh[j] - mean_gh - xhat[j] * mean_ghx);
        }
    }
    (
        gx,
        Array::from_parts(gain.shape().to_vec(), gg),
        Array::from_parts(gain.shape().to_vec(), gb),
    )
}

fn conv_dims(x: &Array, kernel: &Array) -> Result<(usize, usize, usize, usize)> {
    check_rank("depthwise_conv1d", x, 2)?;
    let s = x.shape();
    let (n, c) = (s[s.len() - 2], s[s.len() - 1]);
    let ks = kernel.shape();
    if ks.len() != 2 || ks[0] != c || ks[1] % 2 == 0 {
        return Err(Error::dim(
            "depthwise_conv1d",
            format!("kernel {ks:?} for {c} channels (needs [c, odd k])"),
        ));
    }
    let batch = x.len() / (n * c).max(1);
    Ok((batch, n, c, ks[1]))
}

fn depthwise_conv(x: &Array, kernel: &Array) -> Result<Array> {
    let (batch, n, c, k) = conv_dims(x, kernel)?;
    let half = k / 2;
    let mut out = Array::zeros(x.shape());
    let od = out.data_mut();
    let (xd, kd) = (x.data(), kernel.data());
    for b in 0..batch {
        let base = b * n * c;
        for t in 0..n {
            for j in 0..k {
                let src = t as isize + j as isize - half as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let src = src as usize;
                for ch in 0..c {
                    od[base + t * c + ch] += kd[ch * k + j] * xd[base + src * c + ch];
                }
            }
        }
    }
    Ok(out)
}

fn depthwise_conv_adjoint(x: &Array, kernel: &Array, g: &Array) -> (Array, Array) {
    let (batch, n, c, k) = conv_dims(x, kernel).expect("validated in forward");
    let half = k / 2;
    let mut gx = Array::zeros(x.shape());
    let mut gk = Array::zeros(kernel.shape());
    let (xd, kd, gd) = (x.data(), kernel.data(), g.data());
    {
        let gxd = gx.data_mut();
        let gkd = gk.data_mut();
        for b in 0..batch {
            let base = b * n * c;
            for t in 0..n {
                for j in 0..k {
                    let src = t as isize + j as isize - half as isize;
                    if src < 0 || src >= n as isize {
                        continue;
                    }
                    let src = src as usize;
                    for ch in 0..c {
                        let go = gd[base + t * c + ch];
                        gxd[base + src * c + ch] += kd[ch * k + j] * go;
                        gkd[ch * k + j] += xd[base + src * c + ch] * go;
                    }
                }
            }
        }
    }
    (gx, gk)
}

fn embedding(table: &Array, ids: &[usize], shape: &[usize]) -> Result<Array> {
    if table.rank() != 2 {
        return Err(Error::dim("embedding", format!("table {:?}", table.shape())));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    if shape.iter().product::<usize>() != ids.len() {
        return Err(Error::dim(
            "embedding",
            format!("{} ids for index shape {shape:?}", ids.len()),
        ));
    }
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::dim("embedding", format!("id {id} >= table rows {v}")));
        }
        data.extend_from_slice(table.row(id));
    }
    let mut out_shape = shape.to_vec();
    out_shape.push(d);
    Ok(Array::from_parts(out_shape, data))
}

fn reduce(x: &Array, axis: Option<usize>, mean: bool) -> Result<Array> {
    match axis {
        None => {
            let s: f64 = x.data().iter().sum();
            Ok(Array::scalar(if mean { s / x.len() as f64 } else { s }))
        }
        Some(a) => {
            if a >= x.rank() {
                return Err(Error::dim("sum", format!("axis {a} for {:?}", x.shape())));
            }
            let (outer, len, inner) = split_axis(x.shape(), a);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            if mean {
                for d in &mut data {
                    *d /= len as f64;
                }
            }
            let mut shape = x.shape().to_vec();
            shape.remove(a);
            Ok(Array::from_parts(shape, data))
        }
    }
}

fn expand_reduced(g: &Array, shape: &[usize], axis: Option<usize>, scale: f64) -> Array {
    match axis {
        None => Array::full(shape, g.item() * scale),
        Some(a) => {
            let (outer, len, inner) = split_axis(shape, a);
            let mut data = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        data[(o * len + l) * inner + i] = g.data()[o * inner + i] * scale;
                    }
                }
            }
            Array::from_parts(shape.to_vec(), data)
        }
    }
}
