//! Define-then-run computation graph.
//!
//! A [`Graph`] is built symbolically from named inputs and operations, then
//! evaluated against a set of bindings. Shapes are resolved at evaluation
//! time, so one graph serves any batch size. [`Evaluation::backward`] walks
//! the cached values in reverse node order and accumulates gradients.
//!
//! Binary element-wise ops broadcast like numpy: shapes are aligned on the
//! right and size-1 axes stretch.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Tensor};

/// Clamp applied inside the log of every likelihood loss.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Values bound to the named inputs of a graph.
pub type Bindings = HashMap<String, Tensor>;

#[derive(Clone, Debug)]
pub enum Op {
    Input(String),
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// `1 - x`
    OneMinus(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    ReduceMin {
        input: NodeId,
        axis: usize,
        keep_dim: bool,
    },
    ReduceMax {
        input: NodeId,
        axis: usize,
        keep_dim: bool,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    /// Target shape; at most one entry may be `-1` (inferred).
    Reshape(NodeId, Vec<isize>),
    Transpose(NodeId),
    /// Mean binary cross-entropy of probabilities against targets.
    Bce(NodeId, NodeId),
    /// Mean softmax cross-entropy of `[B, C]` logits against `[B, C]` targets.
    CrossEntropy(NodeId, NodeId),
    /// Cross-entropy of `[B, C]` non-negative scores renormalized per row.
    NormalizedCrossEntropy(NodeId, NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Maximum(..) => "maximum",
            Op::Minimum(..) => "minimum",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::OneMinus(_) => "neg-affine",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ReduceMin { .. } => "reduce-min",
            Op::ReduceMax { .. } => "reduce-max",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Bce(..) => "bce",
            Op::CrossEntropy(..) => "ce",
            Op::NormalizedCrossEntropy(..) => "normalized-ce",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Constant(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Maximum(a, b)
            | Op::Minimum(a, b)
            | Op::Bce(a, b)
            | Op::CrossEntropy(a, b)
            | Op::NormalizedCrossEntropy(a, b) => vec![*a, *b],
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::OneMinus(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a, _)
            | Op::Transpose(a) => vec![*a],
            Op::ReduceMin { input, .. } | Op::ReduceMax { input, .. } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    inputs: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for p in op.parents() {
            assert!(p.0 < self.ops.len(), "parent node from another graph");
        }
        self.ops.push(op);
        NodeId(self.ops.len() - 1)
    }

    /// Declares a named input. Declaring the same name twice returns the same node.
    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        let name = name.into();
        if let Some(&id) = self.inputs.get(&name) {
            return id;
        }
        let id = self.push(Op::Input(name.clone()));
        self.inputs.insert(name, id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
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

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Minimum(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        self.push(Op::OneMinus(a))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn reduce_min(&mut self, input: NodeId, axis: usize, keep_dim: bool) -> NodeId {
        self.push(Op::ReduceMin {
            input,
            axis,
            keep_dim,
        })
    }

    pub fn reduce_max(&mut self, input: NodeId, axis: usize, keep_dim: bool) -> NodeId {
        self.push(Op::ReduceMax {
            input,
            axis,
            keep_dim,
        })
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> NodeId {
        assert!(!inputs.is_empty(), "concat of nothing");
        self.push(Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[isize]) -> NodeId {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn bce(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        self.push(Op::Bce(pred, target))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, target: NodeId) -> NodeId {
        self.push(Op::CrossEntropy(logits, target))
    }

    pub fn normalized_cross_entropy(&mut self, scores: NodeId, target: NodeId) -> NodeId {
        self.push(Op::NormalizedCrossEntropy(scores, target))
    }

    /// `x @ w + b` for `x: [B, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.ops[id.0]
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    /// Computes every node in order. Unbound inputs and shape conflicts are errors.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.ops.len());
        let mut argext: Vec<Option<Vec<usize>>> = vec![None; self.ops.len()];
        for (node, op) in self.ops.iter().enumerate() {
            let v = |id: &NodeId| &values[id.0];
            let value = match op {
                Op::Input(name) => bindings
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?,
                Op::Constant(t) => t.clone(),
                Op::MatMul(a, b) => matmul_forward(node, v(a), v(b))?,
                Op::Add(a, b) => broadcast_binary(node, op, v(a), v(b), |x, y| x + y)?,
                Op::Sub(a, b) => broadcast_binary(node, op, v(a), v(b), |x, y| x - y)?,
                Op::Mul(a, b) => broadcast_binary(node, op, v(a), v(b), |x, y| x * y)?,
                Op::Maximum(a, b) => {
                    broadcast_binary(node, op, v(a), v(b), |x, y| if y > x { y } else { x })?
                }
                Op::Minimum(a, b) => {
                    broadcast_binary(node, op, v(a), v(b), |x, y| if y < x { y } else { x })?
                }
                Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
                Op::Sigmoid(a) => v(a).map(sigmoid),
                Op::OneMinus(a) => v(a).map(|x| 1.0 - x),
                Op::Scale(a, c) => v(a).map(|x| x * c),
                Op::Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
                Op::Mean(a) => {
                    let t = v(a);
                    Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
                }
                Op::ReduceMin {
                    input,
                    axis,
                    keep_dim,
                } => {
                    let (t, idx) = reduce_extreme(node, v(input), *axis, *keep_dim, |c, b| c < b)?;
                    argext[node] = Some(idx);
                    t
                }
                Op::ReduceMax {
                    input,
                    axis,
                    keep_dim,
                } => {
                    let (t, idx) = reduce_extreme(node, v(input), *axis, *keep_dim, |c, b| c > b)?;
                    argext[node] = Some(idx);
                    t
                }
                Op::Concat { inputs, axis } => {
                    let parts: Vec<&Tensor> = inputs.iter().map(v).collect();
                    concat_forward(node, &parts, *axis)?
                }
                Op::Reshape(a, shape) => {
                    let t = v(a);
                    let target = resolve_shape(node, t.shape(), shape)?;
                    t.clone().reshape(target)?
                }
                Op::Transpose(a) => transpose_forward(node, v(a))?,
                Op::Bce(p, t) => {
                    same_shape(node, op, v(p), v(t))?;
                    bce_forward(v(p), v(t))
                }
                Op::CrossEntropy(z, t) => {
                    matrix_pair(node, op, v(z), v(t))?;
                    cross_entropy_forward(v(z), v(t))
                }
                Op::NormalizedCrossEntropy(p, t) => {
                    matrix_pair(node, op, v(p), v(t))?;
                    normalized_ce_forward(v(p), v(t))
                }
            };
            values.push(value);
        }
        Ok(Evaluation { values, argext })
    }
}

/// Cached node values from one forward pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
    argext: Vec<Option<Vec<usize>>>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Reverse pass from a scalar `root`. Nodes that do not feed the root
    /// receive zero gradients.
    pub fn backward(&self, graph: &Graph, root: NodeId) -> Result<Gradients> {
        let root_value = &self.values[root.0];
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Tensor> = self
            .values
            .iter()
            .map(|v| Tensor::zeros(v.shape()))
            .collect();
        grads[root.0].data_mut()[0] = 1.0;

        for node in (0..=root.0).rev() {
            let g = grads[node].clone();
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            let val = |id: &NodeId| &self.values[id.0];
            match &graph.ops[node] {
                Op::Input(_) | Op::Constant(_) => {}
                Op::MatMul(a, b) => {
                    let (ga, gb) = matmul_backward(&g, val(a), val(b));
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::Add(a, b) => {
                    accumulate_broadcast(&mut grads[a.0], &g, 1.0);
                    accumulate_broadcast(&mut grads[b.0], &g, 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate_broadcast(&mut grads[a.0], &g, 1.0);
                    accumulate_broadcast(&mut grads[b.0], &g, -1.0);
                }
                Op::Mul(a, b) | Op::Maximum(a, b) | Op::Minimum(a, b) => {
                    let (ga, gb) = binary_local_grads(&graph.ops[node], &g, val(a), val(b));
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::Relu(a) => {
                    let x = val(a);
                    let local = Tensor::new(
                        x.shape().to_vec(),
                        x.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                            .collect(),
                    )?;
                    accumulate(&mut grads[a.0], &local);
                }
                Op::Sigmoid(a) => {
                    let y = &self.values[node];
                    let local = zip_map(y, &g, |y, g| g * y * (1.0 - y));
                    accumulate(&mut grads[a.0], &local);
                }
                Op::OneMinus(a) => accumulate(&mut grads[a.0], &g.map(|x| -x)),
                Op::Scale(a, c) => accumulate(&mut grads[a.0], &g.map(|x| x * c)),
                Op::Sum(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads[a.0], &Tensor::full(val(a).shape(), s));
                }
                Op::Mean(a) => {
                    let n = val(a).len() as f64;
                    let s = g.data()[0] / n;
                    accumulate(&mut grads[a.0], &Tensor::full(val(a).shape(), s));
                }
                Op::ReduceMin { input, axis, .. } | Op::ReduceMax { input, axis, .. } => {
                    let idx = self.argext[node].as_ref().expect("reduction cache");
                    let shape = val(input).shape();
                    let (outer, len, inner) = split_axis(shape, *axis);
                    let target = grads[input.0].data_mut();
                    for o in 0..outer {
                        for i in 0..inner {
                            let out = o * inner + i;
                            target[o * len * inner + idx[out] * inner + i] += g.data()[out];
                        }
                    }
                }
                Op::Concat { inputs, axis } => {
                    let shapes: Vec<Vec<usize>> =
                        inputs.iter().map(|id| val(id).shape().to_vec()).collect();
                    let parts = concat_backward(&g, &shapes, *axis);
                    for (id, part) in inputs.iter().zip(parts) {
                        accumulate(&mut grads[id.0], &part);
                    }
                }
                Op::Reshape(a, _) => {
                    let back = g.clone().reshape(val(a).shape().to_vec())?;
                    accumulate(&mut grads[a.0], &back);
                }
                Op::Transpose(a) => {
                    let back = transpose_forward(node, &g)?;
                    accumulate(&mut grads[a.0], &back);
                }
                Op::Bce(p, t) => {
                    let (gp, gt) = bce_backward(g.data()[0], val(p), val(t));
                    accumulate(&mut grads[p.0], &gp);
                    accumulate(&mut grads[t.0], &gt);
                }
                Op::CrossEntropy(z, t) => {
                    let (gz, gt) = cross_entropy_backward(g.data()[0], val(z), val(t));
                    accumulate(&mut grads[z.0], &gz);
                    accumulate(&mut grads[t.0], &gt);
                }
                Op::NormalizedCrossEntropy(p, t) => {
                    let (gp, gt) = normalized_ce_backward(g.data()[0], val(p), val(t));
                    accumulate(&mut grads[p.0], &gp);
                    accumulate(&mut grads[t.0], &gt);
                }
            }
        }

        let inputs = graph.inputs.clone();
        Ok(Gradients { grads, inputs })
    }
}

/// Gradients of a scalar root with respect to every node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
    inputs: HashMap<String, NodeId>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }

    /// Gradient with respect to a named input.
    pub fn input(&self, name: &str) -> Option<&Tensor> {
        self.inputs.get(name).map(|id| &self.grads[id.0])
    }
}

/// Evaluates `graph` under `inputs` and returns the value of `root`.
pub fn evaluate_graph(graph: &Graph, inputs: &Bindings, root: NodeId) -> Result<Tensor> {
    Ok(graph.evaluate(inputs)?.value(root).clone())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mismatch(node: usize, op: &Op, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        node,
        op: op.name(),
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn same_shape(node: usize, op: &Op, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(mismatch(node, op, a, b))
    }
}

fn matrix_pair(node: usize, op: &Op, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() == 2 && a.shape() == b.shape() {
        Ok(())
    } else {
        Err(mismatch(node, op, a, b))
    }
}

fn matmul_forward(node: usize, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            node,
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::new(vec![n, m], matmul_raw(a.data(), b.data(), n, k, m))
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn matmul_backward(g: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    // ga = g @ b^T, gb = a^T @ g
    let mut ga = vec![0.0; n * k];
    for i in 0..n {
        for p in 0..k {
            let mut s = 0.0;
            for j in 0..m {
                s += g.data()[i * m + j] * b.data()[p * m + j];
            }
            ga[i * k + p] = s;
        }
    }
    let mut gb = vec![0.0; k * m];
    for i in 0..n {
        for p in 0..k {
            let aip = a.data()[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for j in 0..m {
                gb[p * m + j] += aip * g.data()[i * m + j];
            }
        }
    }
    (
        Tensor::new(vec![n, k], ga).expect("matmul grad"),
        Tensor::new(vec![k, m], gb).expect("matmul grad"),
    )
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid against `out`, with zeros on stretched axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if a == out && b == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn broadcast_binary(
    node: usize,
    op: &Op,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| mismatch(node, op, a, b))?;
    let mut data = vec![0.0; numel(&out)];
    for_each_broadcast(&out, a.shape(), b.shape(), |o, ia, ib| {
        data[o] = f(a.data()[ia], b.data()[ib]);
    });
    Tensor::new(out, data)
}

/// Local gradients of Mul/Maximum/Minimum, reduced back onto each operand's shape.
/// Ties in Maximum/Minimum route to the first operand.
fn binary_local_grads(op: &Op, g: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    {
        let (gad, gbd) = (ga.data_mut(), gb.data_mut());
        for_each_broadcast(g.shape(), a.shape(), b.shape(), |o, ia, ib| {
            let (x, y, up) = (a.data()[ia], b.data()[ib], g.data()[o]);
            match op {
                Op::Mul(..) => {
                    gad[ia] += up * y;
                    gbd[ib] += up * x;
                }
                Op::Maximum(..) => {
                    if y > x {
                        gbd[ib] += up;
                    } else {
                        gad[ia] += up;
                    }
                }
                Op::Minimum(..) => {
                    if y < x {
                        gbd[ib] += up;
                    } else {
                        gad[ia] += up;
                    }
                }
                _ => unreachable!("not a binary product op"),
            }
        });
    }
    (ga, gb)
}

/// Adds `g` into `target`, summing over any axes that `target` broadcast along.
fn accumulate_broadcast(target: &mut Tensor, g: &Tensor, s: f64) {
    let tshape = target.shape().to_vec();
    let t = target.data_mut();
    for_each_broadcast(g.shape(), &tshape, &tshape, |o, it, _| {
        t[it] += s * g.data()[o];
    });
}

fn accumulate(target: &mut Tensor, g: &Tensor) {
    debug_assert_eq!(target.shape(), g.shape());
    for (t, &v) in target.data_mut().iter_mut().zip(g.data()) {
        *t += v;
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce_extreme(
    node: usize,
    t: &Tensor,
    axis: usize,
    keep_dim: bool,
    better: impl Fn(f64, f64) -> bool,
) -> Result<(Tensor, Vec<usize>)> {
    if axis >= t.rank() {
        return Err(Error::InvalidAxis {
            node,
            axis,
            rank: t.rank(),
        });
    }
    let (outer, len, inner) = split_axis(t.shape(), axis);
    let mut values = Vec::with_capacity(outer * inner);
    let mut idx = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| t.data()[o * len * inner + k * inner + i];
            let mut best = 0;
            for k in 1..len {
                if better(at(k), at(best)) {
                    best = k;
                }
            }
            values.push(at(best));
            idx.push(best);
        }
    }
    let mut shape = t.shape().to_vec();
    if keep_dim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Ok((Tensor::new(shape, values)?, idx))
}

fn concat_forward(node: usize, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0];
    if axis >= first.rank() {
        return Err(Error::InvalidAxis {
            node,
            axis,
            rank: first.rank(),
        });
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let compatible = p.rank() == first.rank()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::ShapeMismatch {
                node,
                op: "concat",
                left: first.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        shape[axis] += p.shape()[axis];
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(shape, data)
}

fn concat_backward(g: &Tensor, shapes: &[Vec<usize>], axis: usize) -> Vec<Tensor> {
    let (outer, _, inner) = split_axis(&shapes[0], axis);
    let mut parts: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(numel(s))).collect();
    let mut offset = 0;
    for _ in 0..outer {
        for (s, part) in shapes.iter().zip(parts.iter_mut()) {
            let block = s[axis] * inner;
            part.extend_from_slice(&g.data()[offset..offset + block]);
            offset += block;
        }
    }
    shapes
        .iter()
        .zip(parts)
        .map(|(s, d)| Tensor::new(s.clone(), d).expect("concat grad"))
        .collect()
}

fn resolve_shape(node: usize, from: &[usize], spec: &[isize]) -> Result<Vec<usize>> {
    let total = numel(from);
    let known: usize = spec.iter().filter(|&&d| d > 0).map(|&d| d as usize).product();
    let inferred = spec.iter().filter(|&&d| d == -1).count();
    let bad = || Error::ShapeMismatch {
        node,
        op: "reshape",
        left: from.to_vec(),
        right: spec.iter().map(|&d| d.max(0) as usize).collect(),
    };
    if inferred > 1 || spec.iter().any(|&d| d == 0 || d < -1) || known == 0 {
        return Err(bad());
    }
    let fill = if inferred == 1 {
        if total % known != 0 {
            return Err(bad());
        }
        total / known
    } else {
        if known != total {
            return Err(bad());
        }
        0
    };
    Ok(spec
        .iter()
        .map(|&d| if d == -1 { fill } else { d as usize })
        .collect())
}

fn transpose_forward(node: usize, t: &Tensor) -> Result<Tensor> {
    if t.rank() != 2 {
        return Err(Error::InvalidAxis {
            node,
            axis: 1,
            rank: t.rank(),
        });
    }
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], data)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS)
}

pub(crate) fn bce_forward(p: &Tensor, t: &Tensor) -> Tensor {
    let n = p.len() as f64;
    let total: f64 = p
        .data()
        .iter()
        .zip(t.data())
        .map(|(&p, &t)| {
            let q = clamp_prob(p);
            -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
        })
        .sum();
    Tensor::scalar(total / n)
}

fn bce_backward(up: f64, p: &Tensor, t: &Tensor) -> (Tensor, Tensor) {
    let n = p.len() as f64;
    let gp = zip_map(p, t, |p, t| {
        if p > LOG_EPS && p < 1.0 - LOG_EPS {
            up * (-t / p + (1.0 - t) / (1.0 - p)) / n
        } else {
            0.0
        }
    });
    let gt = p.map(|p| {
        let q = clamp_prob(p);
        -up * (q.ln() - (1.0 - q).ln()) / n
    });
    (gp, gt)
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    row.iter().map(|&z| z - lse).collect()
}

pub(crate) fn cross_entropy_forward(z: &Tensor, t: &Tensor) -> Tensor {
    let b = z.rows();
    let mut total = 0.0;
    for i in 0..b {
        let ls = log_softmax_row(z.row(i));
        total -= ls.iter().zip(t.row(i)).map(|(l, t)| l * t).sum::<f64>();
    }
    Tensor::scalar(total / b as f64)
}

fn cross_entropy_backward(up: f64, z: &Tensor, t: &Tensor) -> (Tensor, Tensor) {
    let b = z.rows();
    let c = z.cols();
    let mut gz = Vec::with_capacity(b * c);
    let mut gt = Vec::with_capacity(b * c);
    for i in 0..b {
        let ls = log_softmax_row(z.row(i));
        let tsum: f64 = t.row(i).iter().sum();
        for (l, &tv) in ls.iter().zip(t.row(i)) {
            gz.push(up * (l.exp() * tsum - tv) / b as f64);
            gt.push(-up * l / b as f64);
        }
    }
    (
        Tensor::new(z.shape().to_vec(), gz).expect("ce grad"),
        Tensor::new(t.shape().to_vec(), gt).expect("ce grad"),
    )
}

pub(crate) fn normalized_ce_forward(p: &Tensor, t: &Tensor) -> Tensor {
    let b = p.rows();
    let mut total = 0.0;
    for i in 0..b {
        let q: Vec<f64> = p.row(i).iter().map(|&v| v.max(LOG_EPS)).collect();
        let s: f64 = q.iter().sum();
        total -= q
            .iter()
            .zip(t.row(i))
            .map(|(&q, &t)| t * (q / s).ln())
            .sum::<f64>();
    }
    Tensor::scalar(total / b as f64)
}

fn normalized_ce_backward(up: f64, p: &Tensor, t: &Tensor) -> (Tensor, Tensor) {
    let b = p.rows();
    let c = p.cols();
    let mut gp = Vec::with_capacity(b * c);
    let mut gt = Vec::with_capacity(b * c);
    for i in 0..b {
        let q: Vec<f64> = p.row(i).iter().map(|&v| v.max(LOG_EPS)).collect();
        let s: f64 = q.iter().sum();
        let tsum: f64 = t.row(i).iter().sum();
        for ((&raw, &qv), &tv) in p.row(i).iter().zip(&q).zip(t.row(i)) {
            let dq = -tv / qv + tsum / s;
            gp.push(if raw > LOG_EPS { up * dq / b as f64 } else { 0.0 });
            gt.push(-up * (qv / s).ln() / b as f64);
        }
    }
    (
        Tensor::new(p.shape().to_vec(), gp).expect("nce grad"),
        Tensor::new(t.shape().to_vec(), gt).expect("nce grad"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> Bindings {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let out = g.matmul(a, b);
        let eye = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap();
        let v = evaluate_graph(&g, &bind(&[("a", eye), ("b", m.clone())]), out).unwrap();
        assert_eq!(v, m);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let w = g.input("w");
        let s = g.sigmoid(w);
        let r = g.sum(s);
        let ev = g.evaluate(&bind(&[("w", Tensor::scalar(0.0))])).unwrap();
        assert_eq!(ev.value(s).item(), Some(0.5));
        let grads = ev.backward(&g, r).unwrap();
        assert_eq!(grads.input("w").unwrap().item(), Some(0.25));
    }

    #[test]
    fn reduce_min_picks_minimum() {
        let mut g = Graph::new();
        let x = g.input("x");
        let m = g.reduce_min(x, 0, false);
        let xv = Tensor::vector(vec![0.2, 1.0, 0.7]).unwrap();
        let v = evaluate_graph(&g, &bind(&[("x", xv)]), m).unwrap();
        assert_eq!(v.item(), Some(0.2));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.sum(x);
        let ev = g
            .evaluate(&bind(&[("x", Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap())]))
            .unwrap();
        let grads = ev.backward(&g, s).unwrap();
        assert_eq!(grads.input("x").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn reduce_ties_route_to_lowest_index() {
        let mut g = Graph::new();
        let x = g.input("x");
        let m = g.reduce_max(x, 0, false);
        let ev = g
            .evaluate(&bind(&[("x", Tensor::vector(vec![0.3, 0.9, 0.9]).unwrap())]))
            .unwrap();
        let grads = ev.backward(&g, m).unwrap();
        assert_eq!(grads.input("x").unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn shape_error_names_node_and_shapes() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let out = g.matmul(a, b);
        let err = g
            .evaluate(&bind(&[
                ("a", Tensor::zeros(&[2, 3])),
                ("b", Tensor::zeros(&[2, 3])),
            ]))
            .unwrap_err();
        match err {
            Error::ShapeMismatch {
                node, left, right, ..
            } => {
                assert_eq!(node, out.index());
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.input("x");
        let r = g.relu(x);
        let ev = g.evaluate(&bind(&[("x", Tensor::zeros(&[2]))])).unwrap();
        assert!(matches!(ev.backward(&g, r), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn unconsumed_nodes_get_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.input("y");
        let _unused = g.sigmoid(y);
        let s = g.sum(x);
        let ev = g
            .evaluate(&bind(&[
                ("x", Tensor::vector(vec![1.0, 2.0]).unwrap()),
                ("y", Tensor::vector(vec![1.0, 2.0]).unwrap()),
            ]))
            .unwrap();
        let grads = ev.backward(&g, s).unwrap();
        assert_eq!(grads.input("y").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_add_sums_gradient_over_rows() {
        let mut g = Graph::new();
        let x = g.input("x");
        let b = g.input("b");
        let y = g.add(x, b);
        let s = g.sum(y);
        let ev = g
            .evaluate(&bind(&[
                ("x", Tensor::zeros(&[3, 2])),
                ("b", Tensor::vector(vec![1.0, 2.0]).unwrap()),
            ]))
            .unwrap();
        assert_eq!(ev.value(y).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let grads = ev.backward(&g, s).unwrap();
        assert_eq!(grads.input("b").unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_and_reshape_round_trip_layout() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.concat(&[a, b], 1);
        let r = g.reshape(c, &[-1, 1]);
        let ev = g
            .evaluate(&bind(&[
                ("a", Tensor::from_rows(&[[1.0], [3.0]]).unwrap()),
                ("b", Tensor::from_rows(&[[2.0], [4.0]]).unwrap()),
            ]))
            .unwrap();
        assert_eq!(ev.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ev.value(r).shape(), &[4, 1]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_classes() {
        let mut g = Graph::new();
        let z = g.input("z");
        let t = g.input("t");
        let l = g.cross_entropy(z, t);
        let v = evaluate_graph(
            &g,
            &bind(&[
                ("z", Tensor::zeros(&[2, 2])),
                ("t", Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()),
            ]),
            l,
        )
        .unwrap();
        assert!((v.item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.input("p");
        let t = g.input("t");
        let l = g.bce(p, t);
        let v = evaluate_graph(
            &g,
            &bind(&[
                ("p", Tensor::full(&[3], 0.5)),
                ("t", Tensor::vector(vec![1.0, 0.0, 1.0]).unwrap()),
            ]),
            l,
        )
        .unwrap();
        assert!((v.item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
