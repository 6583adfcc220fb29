//! Dense tensors and a small reverse-mode automatic differentiation engine.
//!
//! A [`Graph`] is a list of op records in topological order: every op may only
//! reference nodes created before it, so graphs are acyclic by construction.
//! Graphs are immutable once built. Evaluation happens in a separate
//! [`Evaluation`] context that owns the cached per-node outputs, so one graph
//! can be evaluated concurrently with different [`Bindings`].
//!
//! Gradients can be requested for any leaf, which means inputs are as
//! differentiable as parameters.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while building or evaluating a graph.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("tensor shape {shape:?} holds {expected} values but {actual} were given")]
    BadTensor {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("leaf `{name}` (node {node}) is not bound")]
    UnboundLeaf { node: usize, name: String },
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("output node {node} has shape {shape:?}; a seed cotangent is required for non-scalar outputs")]
    SeedRequired { node: usize, shape: Vec<usize> },
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape { seed: Vec<usize>, output: Vec<usize> },
}

/// A dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = GraphError;
    fn try_from(raw: RawTensor) -> Result<Self, GraphError> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, GraphError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(GraphError::BadTensor {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// A rank-0 tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, GraphError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True for tensors holding exactly one value, whatever their rank.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The first value. Meant for scalar outputs.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn same_shape(&self, data: Vec<f64>) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        self.same_shape(self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// The op record stored for each node.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf { name: String },
    Constant(Tensor),
    /// `[m,k]·[k,n]`; a rank-1 left operand is a row, a rank-1 right operand a column.
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    /// Adds a rank-1 tensor of width `n` to every row of an `[m,n]` tensor.
    AddBroadcast(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Relu(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Sum(NodeId),
    /// Sum over flat index ranges. Overlapping ranges count twice.
    SumRanges(NodeId, Vec<Range<usize>>),
    /// `Σ (a - b)²`.
    SquaredDistance(NodeId, NodeId),
    /// Concatenation along the last axis.
    Concat(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBroadcast(..) => "broadcast-add",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Sum(_) => "sum",
            Op::SumRanges(..) => "sum-ranges",
            Op::SquaredDistance(..) => "squared-distance",
            Op::Concat(..) => "concat",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf { .. } | Op::Constant(_) => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBroadcast(a, b)
            | Op::SquaredDistance(a, b)
            | Op::Concat(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Sum(a)
            | Op::SumRanges(a, _) => vec![a],
        }
    }
}

/// A computation graph in topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Op>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0]
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes.get(id.0), Some(Op::Leaf { .. }))
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, op)| matches!(op, Op::Leaf { .. }))
            .map(|(i, _)| NodeId(i))
    }

    fn push(&mut self, op: Op) -> NodeId {
        for input in op.inputs() {
            assert!(
                input.0 < self.nodes.len(),
                "{} references node {input} which is not in this graph",
                op.name()
            );
        }
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf { name: name.into() })
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

    pub fn add_broadcast(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.push(Op::AddBroadcast(a, row))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Cos(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn sum_ranges(&mut self, a: NodeId, ranges: Vec<Range<usize>>) -> NodeId {
        self.push(Op::SumRanges(a, ranges))
    }

    pub fn squared_distance(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::SquaredDistance(a, b))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Concat(a, b))
    }
}

/// Values bound to the leaves of a graph for one evaluation.
#[derive(Clone, Debug, Default)]
pub struct Bindings<'a> {
    values: HashMap<NodeId, Cow<'a, Tensor>>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Bindings::default()
    }

    pub fn bind(&mut self, leaf: NodeId, value: &'a Tensor) -> &mut Self {
        self.values.insert(leaf, Cow::Borrowed(value));
        self
    }

    pub fn bind_owned(&mut self, leaf: NodeId, value: Tensor) -> &mut Self {
        self.values.insert(leaf, Cow::Owned(value));
        self
    }

    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.values.get(&leaf).map(|v| v.as_ref())
    }
}

/// Cached node outputs from one forward pass.
#[derive(Debug)]
pub struct Evaluation<'a> {
    graph: &'a Graph,
    values: Vec<Cow<'a, Tensor>>,
}

/// Evaluates every node of `graph`, caching outputs for a later backward pass.
pub fn forward_eval<'a>(
    graph: &'a Graph,
    bindings: &'a Bindings<'a>,
) -> Result<Evaluation<'a>, GraphError> {
    let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(graph.nodes.len());
    for (index, op) in graph.nodes.iter().enumerate() {
        let value = match op {
            Op::Leaf { name } => match bindings.values.get(&NodeId(index)) {
                Some(v) => Cow::Borrowed(v.as_ref()),
                None => {
                    return Err(GraphError::UnboundLeaf {
                        node: index,
                        name: name.clone(),
                    })
                }
            },
            Op::Constant(t) => Cow::Borrowed(t),
            _ => Cow::Owned(apply(index, op, &values)?),
        };
        values.push(value);
    }
    Ok(Evaluation { graph, values })
}

fn mismatch(node: usize, op: &Op, detail: String) -> GraphError {
    GraphError::ShapeMismatch {
        node,
        op: op.name(),
        detail,
    }
}

/// Resolves `(m, k, n)` for a matmul, accepting rank-1 operands.
fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, Vec<usize>)> {
    let (m, k, a_rank1) = match a {
        [k] => (1, *k, true),
        [m, k] => (*m, *k, false),
        _ => return None,
    };
    let (k2, n, b_rank1) = match b {
        [k2] => (*k2, 1, true),
        [k2, n] => (*k2, *n, false),
        _ => return None,
    };
    if k != k2 {
        return None;
    }
    let shape = match (a_rank1, b_rank1) {
        (true, true) => vec![],
        (true, false) => vec![n],
        (false, true) => vec![m],
        (false, false) => vec![m, n],
    };
    Some((m, k, n, shape))
}

/// `out[m,n] += a[m,k] · b[k,n]`, with optional transposes given as strides.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: impl Fn(usize, usize) -> f64,
    b: &[f64],
    b_transposed: bool,
    out: &mut [f64],
) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a(i, p);
            if av == 0.0 {
                continue;
            }
            if b_transposed {
                // b is stored as [n,k]
                for (j, o) in row.iter_mut().enumerate() {
                    *o += av * b[j * k + p];
                }
            } else {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

fn last_axis_split(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((1, *n)),
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

fn apply(index: usize, op: &Op, values: &[Cow<'_, Tensor>]) -> Result<Tensor, GraphError> {
    let v = |id: &NodeId| -> &Tensor { values[id.0].as_ref() };
    let same_shape = |a: &Tensor, b: &Tensor| -> Result<(), GraphError> {
        if a.shape != b.shape {
            return Err(mismatch(
                index,
                op,
                format!("operand shapes {:?} and {:?} differ", a.shape, b.shape),
            ));
        }
        Ok(())
    };
    let out = match op {
        Op::Leaf { .. } | Op::Constant(_) => unreachable!("leaves are bound, not applied"),
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            let (m, k, n, shape) = matmul_dims(&a.shape, &b.shape).ok_or_else(|| {
                mismatch(
                    index,
                    op,
                    format!("cannot multiply {:?} by {:?}", a.shape, b.shape),
                )
            })?;
            let mut out = vec![0.0; m * n];
            let ad = &a.data;
            gemm(m, k, n, |i, p| ad[i * k + p], &b.data, false, &mut out);
            Tensor { shape, data: out }
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (a, b) = (v(a), v(b));
            same_shape(a, b)?;
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add(..) => |x, y| x + y,
                Op::Sub(..) => |x, y| x - y,
                _ => |x, y| x * y,
            };
            a.same_shape(a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect())
        }
        Op::AddBroadcast(a, row) => {
            let (a, row) = (v(a), v(row));
            let (_, n) = last_axis_split(&a.shape)
                .ok_or_else(|| mismatch(index, op, format!("operand has shape {:?}", a.shape)))?;
            if row.shape != [n] {
                return Err(mismatch(
                    index,
                    op,
                    format!("row shape {:?} cannot broadcast over {:?}", row.shape, a.shape),
                ));
            }
            let mut data = a.data.clone();
            for chunk in data.chunks_mut(n) {
                for (o, &r) in chunk.iter_mut().zip(&row.data) {
                    *o += r;
                }
            }
            a.same_shape(data)
        }
        Op::Scale(a, factor) => v(a).map(|x| x * factor),
        Op::Tanh(a) => v(a).map(f64::tanh),
        Op::Relu(a) => v(a).map(|x| x.max(0.0)),
        Op::Sin(a) => v(a).map(f64::sin),
        Op::Cos(a) => v(a).map(f64::cos),
        Op::Sum(a) => Tensor::scalar(v(a).data.iter().sum()),
        Op::SumRanges(a, ranges) => {
            let a = v(a);
            let mut total = 0.0;
            for r in ranges {
                if r.start > r.end || r.end > a.len() {
                    return Err(mismatch(
                        index,
                        op,
                        format!("range {r:?} out of bounds for {} values", a.len()),
                    ));
                }
                total += a.data[r.clone()].iter().sum::<f64>();
            }
            Tensor::scalar(total)
        }
        Op::SquaredDistance(a, b) => {
            let (a, b) = (v(a), v(b));
            same_shape(a, b)?;
            Tensor::scalar(
                a.data
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum(),
            )
        }
        Op::Concat(a, b) => {
            let (a, b) = (v(a), v(b));
            let err = || {
                mismatch(
                    index,
                    op,
                    format!("cannot concatenate {:?} with {:?}", a.shape, b.shape),
                )
            };
            let (ma, pa) = last_axis_split(&a.shape).ok_or_else(err)?;
            let (mb, pb) = last_axis_split(&b.shape).ok_or_else(err)?;
            if a.shape.len() != b.shape.len() || ma != mb {
                return Err(err());
            }
            let mut data = Vec::with_capacity(a.len() + b.len());
            for r in 0..ma {
                data.extend_from_slice(&a.data[r * pa..(r + 1) * pa]);
                data.extend_from_slice(&b.data[r * pb..(r + 1) * pb]);
            }
            let mut shape = a.shape.clone();
            *shape.last_mut().expect("rank ≥ 1") = pa + pb;
            Tensor { shape, data }
        }
    };
    Ok(out)
}

impl<'a> Evaluation<'a> {
    pub fn graph(&self) -> &'a Graph {
        self.graph
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref()
    }

    /// Reverse-mode pass from `output`.
    ///
    /// Returns `∂output/∂leaf` for every leaf in `wrt`, shaped like the leaf.
    /// Scalar outputs default to a unit seed; other outputs need `seed`,
    /// which is then the cotangent being pulled back.
    pub fn backward(
        &self,
        output: NodeId,
        wrt: &[NodeId],
        seed: Option<&Tensor>,
    ) -> Result<HashMap<NodeId, Tensor>, GraphError> {
        let graph = self.graph;
        if output.0 >= graph.nodes.len() {
            return Err(GraphError::UnknownNode(output.0));
        }
        for id in wrt {
            if id.0 >= graph.nodes.len() {
                return Err(GraphError::UnknownNode(id.0));
            }
            if !graph.is_leaf(*id) {
                return Err(GraphError::NotALeaf(id.0));
            }
        }
        let out_value = self.value(output);
        let seed = match seed {
            Some(s) if s.shape != out_value.shape => {
                return Err(GraphError::SeedShape {
                    seed: s.shape.clone(),
                    output: out_value.shape.clone(),
                })
            }
            Some(s) => s.clone(),
            None if out_value.is_scalar() => out_value.same_shape(vec![1.0]),
            None => {
                return Err(GraphError::SeedRequired {
                    node: output.0,
                    shape: out_value.shape.clone(),
                })
            }
        };

        // Only nodes that lie on a path from a requested leaf need cotangents.
        let mut needed = vec![false; output.0 + 1];
        for id in wrt {
            if id.0 <= output.0 {
                needed[id.0] = true;
            }
        }
        for i in 0..=output.0 {
            if !needed[i] {
                needed[i] = graph.nodes[i].inputs().iter().any(|p| needed[p.0]);
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = &graph.nodes[i];
            if let Op::Leaf { .. } = op {
                grads[i] = Some(g);
                continue;
            }
            for (input, contribution) in self.pullback(op, i, &g) {
                if !needed[input.0] {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data.iter_mut().zip(&contribution.data) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|&id| {
                let g = grads
                    .get(id.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(&self.value(id).shape));
                (id, g)
            })
            .collect())
    }

    fn pullback(&self, op: &Op, index: usize, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let v = |id: &NodeId| self.value(*id);
        let out = self.value(NodeId(index));
        match op {
            Op::Leaf { .. } | Op::Constant(_) => Vec::new(),
            Op::MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (m, k, n, _) = matmul_dims(&av.shape, &bv.shape).expect("checked in forward");
                // dA = dC · Bᵀ
                let mut da = vec![0.0; m * k];
                let gd = &g.data;
                gemm(m, n, k, |i, j| gd[i * n + j], &bv.data, true, &mut da);
                // dB = Aᵀ · dC
                let mut db = vec![0.0; k * n];
                let ad = &av.data;
                gemm(k, m, n, |p, i| ad[i * k + p], &g.data, false, &mut db);
                vec![(*a, av.same_shape(da)), (*b, bv.same_shape(db))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let ga = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                let gb = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                vec![(*a, g.same_shape(ga)), (*b, g.same_shape(gb))]
            }
            Op::AddBroadcast(a, row) => {
                let n = v(row).len();
                let mut gr = vec![0.0; n];
                for chunk in g.data.chunks(n) {
                    for (o, &x) in gr.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                vec![(*a, g.clone()), (*row, v(row).same_shape(gr))]
            }
            Op::Scale(a, factor) => vec![(*a, g.map(|x| x * factor))],
            Op::Tanh(a) => {
                let d = g.data.iter().zip(&out.data).map(|(x, y)| x * (1.0 - y * y)).collect();
                vec![(*a, g.same_shape(d))]
            }
            Op::Relu(a) => {
                let d = g
                    .data
                    .iter()
                    .zip(&v(a).data)
                    .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                    .collect();
                vec![(*a, g.same_shape(d))]
            }
            Op::Sin(a) => {
                let d = g.data.iter().zip(&v(a).data).map(|(x, y)| x * y.cos()).collect();
                vec![(*a, g.same_shape(d))]
            }
            Op::Cos(a) => {
                let d = g.data.iter().zip(&v(a).data).map(|(x, y)| -x * y.sin()).collect();
                vec![(*a, g.same_shape(d))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(&v(a).shape, g.item()))],
            Op::SumRanges(a, ranges) => {
                let mut d = Tensor::zeros(&v(a).shape);
                for r in ranges {
                    for x in &mut d.data[r.clone()] {
                        *x += g.item();
                    }
                }
                vec![(*a, d)]
            }
            Op::SquaredDistance(a, b) => {
                let (av, bv) = (v(a), v(b));
                let s = 2.0 * g.item();
                let ga: Vec<f64> = av.data.iter().zip(&bv.data).map(|(x, y)| s * (x - y)).collect();
                let gb = ga.iter().map(|x| -x).collect();
                vec![(*a, av.same_shape(ga)), (*b, bv.same_shape(gb))]
            }
            Op::Concat(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (rows, pa) = last_axis_split(&av.shape).expect("checked in forward");
                let (_, pb) = last_axis_split(&bv.shape).expect("checked in forward");
                let mut ga = Vec::with_capacity(av.len());
                let mut gb = Vec::with_capacity(bv.len());
                for r in 0..rows {
                    let row = &g.data[r * (pa + pb)..(r + 1) * (pa + pb)];
                    ga.extend_from_slice(&row[..pa]);
                    gb.extend_from_slice(&row[pa..]);
                }
                vec![(*a, av.same_shape(ga)), (*b, bv.same_shape(gb))]
            }
        }
    }
}

/// Compares the analytic gradient of a scalar `output` with respect to `leaf`
/// against central finite differences with step `eps`.
///
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over the
/// components of the leaf.
pub fn grad_check(
    graph: &Graph,
    bindings: &Bindings<'_>,
    output: NodeId,
    leaf: NodeId,
    eps: f64,
) -> Result<f64, GraphError> {
    let analytic = {
        let eval = forward_eval(graph, bindings)?;
        eval.backward(output, &[leaf], None)?
            .remove(&leaf)
            .expect("requested leaf")
    };
    let base = bindings
        .get(leaf)
        .ok_or_else(|| GraphError::UnboundLeaf {
            node: leaf.0,
            name: match graph.op(leaf) {
                Op::Leaf { name } => name.clone(),
                _ => String::new(),
            },
        })?
        .clone();
    let probe = |value: Tensor| -> Result<f64, GraphError> {
        let mut b = bindings.clone();
        b.bind_owned(leaf, value);
        Ok(forward_eval(graph, &b)?.value(output).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus.data[i] += eps;
        let mut minus = base.clone();
        minus.data[i] -= eps;
        let numeric = (probe(plus)? - probe(minus)?) / (2.0 * eps);
        let a = analytic.data[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
