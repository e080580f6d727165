//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation in creation order. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and
//! accumulates `∂root/∂node` for every node that depends on a
//! differentiable leaf. Tapes are rebuilt for every training step, so
//! recurrent graphs of any unrolled length are handled the same way.
//!
//! Broadcasting is limited to scalar-vs-tensor for the elementwise ops;
//! the only other implicit expansion is [`Op::AddRow`], which adds a bias
//! vector to every row of a matrix.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid input shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op}: argument {value} outside the domain of the function")]
    Domain { op: &'static str, value: f64 },
    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("node {0} is not part of this tape")]
    UnknownNode(usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(AutodiffError::InvalidShape {
                op: "tensor",
                shape,
                reason: "dimensions must be positive",
            });
        }
        if expected != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            shape: vec![n, n],
            data,
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation recorded on the tape. Each variant names its input nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Matrix product of `[m × k]` and `[k × n]`.
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Hadamard product.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `[m × n] + [n]`, the bias added to every row.
    AddRow(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId, Vec<usize>),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug, Clone)]
enum Source {
    Leaf,
    Op(Op),
}

#[derive(Debug, Clone)]
struct Node {
    source: Source,
    value: Tensor,
    requires_grad: bool,
}

/// Wengert list of nodes in creation (and therefore topological) order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

#[cfg(test)]
thread_local! {
    /// Negative-control hook: swaps the tanh derivative for a wrong one.
    static CORRUPT_TANH_BACKWARD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
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

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(Source::Leaf, value, true)
    }

    /// Leaf excluded from differentiation; its gradient always reads as zero.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Source::Leaf, value, false)
    }

    fn push(&mut self, source: Source, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            source,
            value,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn checked(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(AutodiffError::UnknownNode(id.0))
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let shape = self.nodes[id.0].value.shape.clone();
        match &self.grads[id.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }

    /// Records `op` and returns the node holding its result.
    pub fn apply(&mut self, op: Op) -> Result<NodeId> {
        for input in op.inputs() {
            self.checked(input)?;
        }
        let value = self.evaluate(&op)?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(Source::Op(op), value, requires_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Op::Scale(a, factor))
    }
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Op::AddRow(a, bias))
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Transpose(a))
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Op::Reshape(a, shape.to_vec()))
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Tanh(a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid(a))
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp(a))
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Log(a))
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Square(a))
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean(a))
    }
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        })
    }
    pub fn slice(
        &mut self,
        input: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId> {
        self.apply(Op::Slice {
            input,
            axis,
            start,
            len,
        })
    }

    fn evaluate(&self, op: &Op) -> Result<Tensor> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        match op {
            Op::MatMul(a, b) => matmul(v(a), v(b)),
            Op::Add(a, b) => broadcast_binary("add", v(a), v(b), |x, y| x + y),
            Op::Sub(a, b) => broadcast_binary("sub", v(a), v(b), |x, y| x - y),
            Op::Mul(a, b) => broadcast_binary("mul", v(a), v(b), |x, y| x * y),
            Op::Scale(a, c) => Ok(map(v(a), |x| c * x)),
            Op::AddRow(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.shape.len() != 2 || b.shape.len() != 1 || a.shape[1] != b.shape[0] {
                    return Err(mismatch("add_row", a, b));
                }
                let cols = b.shape[0];
                let data = a
                    .data
                    .chunks_exact(cols)
                    .flat_map(|row| row.iter().zip(&b.data).map(|(x, y)| x + y))
                    .collect();
                Ok(Tensor {
                    shape: a.shape.clone(),
                    data,
                })
            }
            Op::Transpose(a) => {
                let a = v(a);
                require_rank("transpose", a, 2)?;
                Ok(transpose(a))
            }
            Op::Reshape(a, shape) => {
                let a = v(a);
                let n: usize = shape.iter().product();
                if n != a.numel() || shape.contains(&0) {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "reshape",
                        lhs: a.shape.clone(),
                        rhs: shape.clone(),
                    });
                }
                Ok(Tensor {
                    shape: shape.clone(),
                    data: a.data.clone(),
                })
            }
            Op::Tanh(a) => Ok(map(v(a), f64::tanh)),
            Op::Sigmoid(a) => Ok(map(v(a), sigmoid)),
            Op::Exp(a) => Ok(map(v(a), f64::exp)),
            Op::Log(a) => {
                let a = v(a);
                if let Some(&bad) = a.data.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                    return Err(AutodiffError::Domain {
                        op: "log",
                        value: bad,
                    });
                }
                Ok(map(a, f64::ln))
            }
            Op::Square(a) => Ok(map(v(a), |x| x * x)),
            Op::Sum(a) => Ok(Tensor::scalar(v(a).data.iter().sum())),
            Op::Mean(a) => {
                let a = v(a);
                Ok(Tensor::scalar(
                    a.data.iter().sum::<f64>() / a.numel() as f64,
                ))
            }
            Op::Concat { inputs, axis } => {
                let tensors: Vec<&Tensor> = inputs.iter().map(v).collect();
                concat(&tensors, *axis)
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => slice(v(input), *axis, *start, *len),
        }
    }

    /// Fills gradients of every node with `∂root/∂node`.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let root_value = self.checked(root)?;
        if root_value.numel() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_value.shape.clone()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            if let Source::Op(op) = &self.nodes[idx].source {
                for (input, d) in self.input_gradients(op, idx, &g) {
                    match &mut self.grads[input.0] {
                        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, x)| *a += x),
                        slot @ None => *slot = Some(d),
                    }
                }
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Vector-Jacobian products of `op` for every input that needs a gradient.
    fn input_gradients(&self, op: &Op, idx: usize, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let out = &self.nodes[idx].value;
        let mut contribs: Vec<(NodeId, Vec<f64>)> = Vec::new();
        let val = |id: &NodeId| &self.nodes[id.0].value;
        let wants = |id: &NodeId| self.nodes[id.0].requires_grad;

        match op {
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                if wants(a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    contribs.push((*a, da));
                }
                if wants(b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av.data[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, x) in drow.iter_mut().zip(grow) {
                                *d += aip * x;
                            }
                        }
                    }
                    contribs.push((*b, db));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(a) {
                    contribs.push((*a, reduce_broadcast(g, val(a).numel(), 1.0)));
                }
                if wants(b) {
                    contribs.push((*b, reduce_broadcast(g, val(b).numel(), sign)));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if wants(a) {
                    let prod = broadcast_product(g, &bv.data, out.numel());
                    contribs.push((*a, reduce_broadcast(&prod, av.numel(), 1.0)));
                }
                if wants(b) {
                    let prod = broadcast_product(g, &av.data, out.numel());
                    contribs.push((*b, reduce_broadcast(&prod, bv.numel(), 1.0)));
                }
            }
            Op::Scale(a, c) => {
                if wants(a) {
                    contribs.push((*a, g.iter().map(|x| c * x).collect()));
                }
            }
            Op::AddRow(a, b) => {
                if wants(a) {
                    contribs.push((*a, g.to_vec()));
                }
                if wants(b) {
                    let cols = val(b).numel();
                    let mut db = vec![0.0; cols];
                    for row in g.chunks_exact(cols) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    contribs.push((*b, db));
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    let gt = Tensor {
                        shape: out.shape.clone(),
                        data: g.to_vec(),
                    };
                    contribs.push((*a, transpose(&gt).data));
                }
            }
            Op::Reshape(a, _) => {
                if wants(a) {
                    contribs.push((*a, g.to_vec()));
                }
            }
            Op::Tanh(a) => {
                if wants(a) {
                    #[cfg(test)]
                    let corrupt = CORRUPT_TANH_BACKWARD.with(|c| c.get());
                    #[cfg(not(test))]
                    let corrupt = false;
                    let d = out
                        .data
                        .iter()
                        .zip(g)
                        .map(|(y, gi)| {
                            if corrupt {
                                gi * (1.0 - y)
                            } else {
                                gi * (1.0 - y * y)
                            }
                        })
                        .collect();
                    contribs.push((*a, d));
                }
            }
            Op::Sigmoid(a) => {
                if wants(a) {
                    let d = out
                        .data
                        .iter()
                        .zip(g)
                        .map(|(y, gi)| gi * y * (1.0 - y))
                        .collect();
                    contribs.push((*a, d));
                }
            }
            Op::Exp(a) => {
                if wants(a) {
                    let d = out.data.iter().zip(g).map(|(y, gi)| gi * y).collect();
                    contribs.push((*a, d));
                }
            }
            Op::Log(a) => {
                if wants(a) {
                    let d = val(a).data.iter().zip(g).map(|(x, gi)| gi / x).collect();
                    contribs.push((*a, d));
                }
            }
            Op::Square(a) => {
                if wants(a) {
                    let d = val(a)
                        .data
                        .iter()
                        .zip(g)
                        .map(|(x, gi)| 2.0 * x * gi)
                        .collect();
                    contribs.push((*a, d));
                }
            }
            Op::Sum(a) => {
                if wants(a) {
                    contribs.push((*a, vec![g[0]; val(a).numel()]));
                }
            }
            Op::Mean(a) => {
                if wants(a) {
                    let n = val(a).numel();
                    contribs.push((*a, vec![g[0] / n as f64; n]));
                }
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out.shape[..*axis].iter().product();
                let inner: usize = out.shape[*axis + 1..].iter().product();
                let out_chunk = out.shape[*axis] * inner;
                let mut offset = 0;
                for id in inputs {
                    let chunk = val(id).shape[*axis] * inner;
                    if wants(id) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * out_chunk + offset;
                            d.extend_from_slice(&g[base..base + chunk]);
                        }
                        contribs.push((*id, d));
                    }
                    offset += chunk;
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                if wants(input) {
                    let iv = val(input);
                    let outer: usize = iv.shape[..*axis].iter().product();
                    let inner: usize = iv.shape[*axis + 1..].iter().product();
                    let in_chunk = iv.shape[*axis] * inner;
                    let chunk = len * inner;
                    let mut d = vec![0.0; iv.numel()];
                    for o in 0..outer {
                        let dst = o * in_chunk + start * inner;
                        d[dst..dst + chunk].copy_from_slice(&g[o * chunk..(o + 1) * chunk]);
                    }
                    contribs.push((*input, d));
                }
            }
        }
        contribs
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

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn require_rank(op: &'static str, a: &Tensor, rank: usize) -> Result<()> {
    if a.shape.len() != rank {
        return Err(AutodiffError::InvalidShape {
            op,
            shape: a.shape.clone(),
            reason: if rank == 2 {
                "expected a matrix"
            } else {
                "unexpected rank"
            },
        });
    }
    Ok(())
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor {
            shape: a.shape.clone(),
            data,
        })
    } else if b.numel() == 1 {
        let y = b.data[0];
        Ok(map(a, |x| f(x, y)))
    } else if a.numel() == 1 {
        let x = a.data[0];
        Ok(map(b, |y| f(x, y)))
    } else {
        Err(mismatch(op, a, b))
    }
}

/// Elementwise `g * other`, broadcasting `other` when it is a scalar.
fn broadcast_product(g: &[f64], other: &[f64], n: usize) -> Vec<f64> {
    if other.len() == n {
        g.iter().zip(other).map(|(x, y)| x * y).collect()
    } else {
        let y = other[0];
        g.iter().map(|x| x * y).collect()
    }
}

/// Folds an output-shaped gradient back onto an operand of `numel` values.
fn reduce_broadcast(g: &[f64], numel: usize, sign: f64) -> Vec<f64> {
    if numel == g.len() {
        g.iter().map(|x| sign * x).collect()
    } else {
        vec![sign * g.iter().sum::<f64>()]
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(mismatch("matmul", a, b));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut data[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (c, x) in crow.iter_mut().zip(brow) {
                *c += aip * x;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data,
    })
}

fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor {
        shape: vec![c, r],
        data,
    }
}

fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = tensors.first().ok_or(AutodiffError::InvalidShape {
        op: "concat",
        shape: vec![],
        reason: "no inputs",
    })?;
    if axis >= first.shape.len() {
        return Err(AutodiffError::InvalidShape {
            op: "concat",
            shape: first.shape.clone(),
            reason: "axis out of range",
        });
    }
    let mut shape = first.shape.clone();
    shape[axis] = 0;
    for t in tensors {
        let compatible = t.shape.len() == first.shape.len()
            && t.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !compatible {
            return Err(mismatch("concat", first, t));
        }
        shape[axis] += t.shape[axis];
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in tensors {
            let chunk = t.shape[axis] * inner;
            data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor { shape, data })
}

fn slice(a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= a.shape.len() || len == 0 || start + len > a.shape[axis] {
        return Err(AutodiffError::InvalidShape {
            op: "slice",
            shape: a.shape.clone(),
            reason: "slice range outside the tensor",
        });
    }
    let outer: usize = a.shape[..axis].iter().product();
    let inner: usize = a.shape[axis + 1..].iter().product();
    let in_chunk = a.shape[axis] * inner;
    let chunk = len * inner;
    let mut data = Vec::with_capacity(outer * chunk);
    for o in 0..outer {
        let src = o * in_chunk + start * inner;
        data.extend_from_slice(&a.data[src..src + chunk]);
    }
    let mut shape = a.shape.clone();
    shape[axis] = len;
    Ok(Tensor { shape, data })
}

/// Outcome of comparing analytic gradients with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst component.
    pub worst: Option<(usize, usize)>,
    pub components: usize,
    pub passed: bool,
}

/// Gradient magnitudes below this are compared on an absolute scale, so
/// finite-difference round-off on vanishing gradients does not dominate.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks the tape's gradients of `f` against `(f(p+h) − f(p−h)) / 2h`.
///
/// `f` receives a fresh tape and one variable node per entry of `params`
/// and must return a scalar node.
pub fn gradient_check<F, E>(
    f: F,
    params: &[Tensor],
    h: f64,
    tol: f64,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[NodeId]) -> std::result::Result<NodeId, E>,
    E: From<AutodiffError>,
{
    let eval = |ps: &[Tensor]| -> std::result::Result<(Tape, Vec<NodeId>, NodeId), E> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| tape.variable(p.clone())).collect();
        let root = f(&mut tape, &ids)?;
        Ok((tape, ids, root))
    };
    let scalar = |tape: &Tape, root: NodeId| -> std::result::Result<f64, E> {
        tape.value(root)
            .item()
            .ok_or_else(|| AutodiffError::NonScalarRoot(tape.value(root).shape.clone()).into())
    };

    let (mut tape, ids, root) = eval(params)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| tape.grad(id)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        components: 0,
        passed: true,
    };
    let mut probe = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.numel() {
            let original = probe[pi].data[ei];
            probe[pi].data[ei] = original + h;
            let (t, _, r) = eval(&probe)?;
            let plus = scalar(&t, r)?;
            probe[pi].data[ei] = original - h;
            let (t, _, r) = eval(&probe)?;
            let minus = scalar(&t, r)?;
            probe[pi].data[ei] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(grad.data[ei], numeric);
            report.components += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = Some((pi, ei));
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
