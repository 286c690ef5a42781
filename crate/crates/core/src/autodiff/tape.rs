use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::{self, Tensor};
use super::AutodiffError;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Differentiable operations understood by [`Tape::apply`].
///
/// All ops work on 2-D tensors except `Reshape`, `MeanAll` and `SumAll`,
/// which accept any shape.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    MulElem,
    DivElem,
    Scale(f64),
    Relu,
    Sigmoid,
    Softplus,
    SoftmaxRows,
    MeanAll,
    SumAll,
    ConcatRows,
    SliceRows {
        start: usize,
        end: usize,
    },
    Transpose2d,
    Reshape(Vec<usize>),
    /// `(m x n) + (1 x n)`, the row repeated down every row.
    BroadcastAddRow,
    /// `out[i] = input[index[i]]` over flattened storage.
    Gather {
        shape: Vec<usize>,
        index: Arc<[usize]>,
    },
}

impl OpKind {
    /// Names accepted by [`OpKind::from_str`]. Parameterised ops parse to a
    /// neutral default (`scale` -> 1.0, `slice_rows` -> row 0 only, ...).
    pub const NAMES: [&'static str; 18] = [
        "matmul",
        "add",
        "sub",
        "mul_elem",
        "div_elem",
        "scale",
        "relu",
        "sigmoid",
        "softplus",
        "softmax_rows",
        "mean_all",
        "sum_all",
        "concat_rows",
        "slice_rows",
        "transpose2d",
        "reshape",
        "broadcast_add_row",
        "gather",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::MulElem => "mul_elem",
            OpKind::DivElem => "div_elem",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::MeanAll => "mean_all",
            OpKind::SumAll => "sum_all",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::Transpose2d => "transpose2d",
            OpKind::Reshape(_) => "reshape",
            OpKind::BroadcastAddRow => "broadcast_add_row",
            OpKind::Gather { .. } => "gather",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::MulElem
            | OpKind::DivElem
            | OpKind::BroadcastAddRow => Some(2),
            OpKind::ConcatRows => None,
            _ => Some(1),
        }
    }
}

impl FromStr for OpKind {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul_elem" => OpKind::MulElem,
            "div_elem" => OpKind::DivElem,
            "scale" => OpKind::Scale(1.0),
            "relu" => OpKind::Relu,
            "sigmoid" => OpKind::Sigmoid,
            "softplus" => OpKind::Softplus,
            "softmax_rows" => OpKind::SoftmaxRows,
            "mean_all" => OpKind::MeanAll,
            "sum_all" => OpKind::SumAll,
            "concat_rows" => OpKind::ConcatRows,
            "slice_rows" => OpKind::SliceRows { start: 0, end: 1 },
            "transpose2d" => OpKind::Transpose2d,
            "reshape" => OpKind::Reshape(Vec::new()),
            "broadcast_add_row" => OpKind::BroadcastAddRow,
            "gather" => OpKind::Gather {
                shape: Vec::new(),
                index: Arc::from(Vec::new()),
            },
            other => return Err(AutodiffError::UnknownOp(other.to_string())),
        })
    }
}

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Source {
    Leaf,
    Constant,
    Op(OpKind),
}

#[derive(Debug)]
struct Node {
    source: Source,
    parents: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Wengert list for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every parent index is smaller
/// than its child's. A tape is single-threaded; build one per worker.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Source::Leaf, Vec::new(), value, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Source::Constant, Vec::new(), value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        self.check(var).expect("variable from another tape");
        &self.nodes[var.index].value
    }

    fn push(&mut self, source: Source, parents: Vec<usize>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            source,
            parents,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<(), AutodiffError> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(AutodiffError::DetachedNode);
        }
        Ok(())
    }

    fn dims(&self, var: Var, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        self.nodes[var.index]
            .value
            .dims2()
            .ok_or_else(|| AutodiffError::ShapeMismatch {
                op,
                detail: format!("expected a 2-D input, got {:?}", self.nodes[var.index].value.shape()),
            })
    }

    /// Evaluates `op` on `inputs` and records the result.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var, AutodiffError> {
        for &v in inputs {
            self.check(v)?;
        }
        let name = op.name();
        match op.arity() {
            Some(n) if n != inputs.len() => {
                return Err(AutodiffError::ShapeMismatch {
                    op: name,
                    detail: format!("expected {n} inputs, got {}", inputs.len()),
                })
            }
            None if inputs.is_empty() => {
                return Err(AutodiffError::ShapeMismatch {
                    op: name,
                    detail: "expected at least one input".into(),
                })
            }
            _ => {}
        }
        let value = self.forward(&op, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        let parents = inputs.iter().map(|v| v.index).collect();
        Ok(self.push(Source::Op(op), parents, value, requires_grad))
    }

    fn forward(&self, op: &OpKind, inputs: &[Var]) -> Result<Tensor, AutodiffError> {
        let name = op.name();
        let val = |i: usize| &self.nodes[inputs[i].index].value;
        let same_shape = |a: &Tensor, b: &Tensor| {
            if a.shape() != b.shape() {
                Err(AutodiffError::ShapeMismatch {
                    op: name,
                    detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
                })
            } else {
                Ok(())
            }
        };
        Ok(match op {
            OpKind::MatMul => {
                let (m, k) = self.dims(inputs[0], name)?;
                let (k2, n) = self.dims(inputs[1], name)?;
                if k != k2 {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        detail: format!("{m}x{k} * {k2}x{n}"),
                    });
                }
                Tensor::matrix(m, n, tensor::matmul(val(0).data(), val(1).data(), m, k, n))
            }
            OpKind::Add | OpKind::Sub | OpKind::MulElem | OpKind::DivElem => {
                let (a, b) = (val(0), val(1));
                same_shape(a, b)?;
                match op {
                    OpKind::Add => a.zip_map(b, |x, y| x + y),
                    OpKind::Sub => a.zip_map(b, |x, y| x - y),
                    OpKind::MulElem => a.zip_map(b, |x, y| x * y),
                    _ => a.zip_map(b, |x, y| x / y),
                }
            }
            OpKind::Scale(s) => {
                let s = *s;
                val(0).map(|x| x * s)
            }
            OpKind::Relu => val(0).map(|x| x.max(0.0)),
            OpKind::Sigmoid => val(0).map(tensor::sigmoid),
            OpKind::Softplus => val(0).map(tensor::softplus),
            OpKind::SoftmaxRows => {
                let (rows, cols) = self.dims(inputs[0], name)?;
                let x = val(0).data();
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = &x[r * cols..(r + 1) * cols];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let o = &mut out[r * cols..(r + 1) * cols];
                    let mut total = 0.0;
                    for (dst, &v) in o.iter_mut().zip(row) {
                        *dst = (v - max).exp();
                        total += *dst;
                    }
                    for dst in o.iter_mut() {
                        *dst /= total;
                    }
                }
                Tensor::matrix(rows, cols, out)
            }
            OpKind::MeanAll => {
                let v = val(0);
                Tensor::scalar(v.sum() / v.numel() as f64)
            }
            OpKind::SumAll => Tensor::scalar(val(0).sum()),
            OpKind::ConcatRows => {
                let (_, cols) = self.dims(inputs[0], name)?;
                let mut rows = 0;
                let mut data = Vec::new();
                for (i, &v) in inputs.iter().enumerate() {
                    let (r, c) = self.dims(v, name)?;
                    if c != cols {
                        return Err(AutodiffError::ShapeMismatch {
                            op: name,
                            detail: format!("input {i} has {c} columns, expected {cols}"),
                        });
                    }
                    rows += r;
                    data.extend_from_slice(self.nodes[v.index].value.data());
                }
                Tensor::matrix(rows, cols, data)
            }
            OpKind::SliceRows { start, end } => {
                let (rows, cols) = self.dims(inputs[0], name)?;
                if start >= end || *end > rows {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        detail: format!("rows {start}..{end} of {rows}"),
                    });
                }
                Tensor::matrix(end - start, cols, val(0).data()[start * cols..end * cols].to_vec())
            }
            OpKind::Transpose2d => {
                let (rows, cols) = self.dims(inputs[0], name)?;
                Tensor::matrix(cols, rows, tensor::transpose(val(0).data(), rows, cols))
            }
            OpKind::Reshape(shape) => val(0)
                .reshaped(shape.clone())
                .map_err(|_| AutodiffError::ShapeMismatch {
                    op: name,
                    detail: format!("cannot reshape {:?} to {shape:?}", val(0).shape()),
                })?,
            OpKind::BroadcastAddRow => {
                let (rows, cols) = self.dims(inputs[0], name)?;
                let (br, bc) = self.dims(inputs[1], name)?;
                if br != 1 || bc != cols {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        detail: format!("{rows}x{cols} + {br}x{bc}"),
                    });
                }
                let bias = val(1).data();
                let mut data = val(0).data().to_vec();
                for row in data.chunks_mut(cols) {
                    for (d, b) in row.iter_mut().zip(bias) {
                        *d += b;
                    }
                }
                Tensor::matrix(rows, cols, data)
            }
            OpKind::Gather { shape, index } => {
                let src = val(0).data();
                if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        detail: format!("index {bad} out of range for {} elements", src.len()),
                    });
                }
                let data = index.iter().map(|&i| src[i]).collect();
                Tensor::new(shape.clone(), data)?
            }
        })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        self.check(loss)?;
        let loss_value = &self.nodes[loss.index].value;
        if !loss_value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            match &node.source {
                Source::Leaf => {
                    grads[i] = Some(g);
                }
                Source::Constant => {}
                Source::Op(op) => {
                    for (slot, contrib) in self.vjp(op, node, &g) {
                        let parent = node.parents[slot];
                        if !self.nodes[parent].requires_grad {
                            continue;
                        }
                        match &mut grads[parent] {
                            Some(acc) => {
                                for (a, c) in acc.iter_mut().zip(&contrib) {
                                    *a += c;
                                }
                            }
                            empty => *empty = Some(contrib),
                        }
                    }
                }
            }
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.source, Source::Leaf))
            .map(|(i, n)| {
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; n.value.numel()]);
                let grad = Tensor::new(n.value.shape().to_vec(), data).expect("gradient matches leaf shape");
                (i, grad)
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            leaves,
            visited,
        })
    }

    /// Vector-Jacobian products for each parent slot that needs one.
    fn vjp(&self, op: &OpKind, node: &Node, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let parent = |slot: usize| &self.nodes[node.parents[slot]];
        let wants = |slot: usize| parent(slot).requires_grad;
        let out = &node.value;
        match op {
            OpKind::MatMul => {
                let a = &parent(0).value;
                let b = &parent(1).value;
                let (m, k) = a.dims2().unwrap();
                let (_, n) = b.dims2().unwrap();
                let mut res = Vec::new();
                if wants(0) {
                    res.push((0, tensor::matmul_a_bt(g, b.data(), m, n, k)));
                }
                if wants(1) {
                    res.push((1, tensor::matmul_at_b(a.data(), g, m, k, n)));
                }
                res
            }
            OpKind::Add => vec![(0, g.to_vec()), (1, g.to_vec())],
            OpKind::Sub => vec![(0, g.to_vec()), (1, g.iter().map(|v| -v).collect())],
            OpKind::MulElem => {
                let a = parent(0).value.data();
                let b = parent(1).value.data();
                vec![
                    (0, g.iter().zip(b).map(|(g, b)| g * b).collect()),
                    (1, g.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            }
            OpKind::DivElem => {
                let a = parent(0).value.data();
                let b = parent(1).value.data();
                vec![
                    (0, g.iter().zip(b).map(|(g, b)| g / b).collect()),
                    (
                        1,
                        g.iter()
                            .zip(a.iter().zip(b))
                            .map(|(g, (a, b))| -g * a / (b * b))
                            .collect(),
                    ),
                ]
            }
            OpKind::Scale(s) => vec![(0, g.iter().map(|v| v * s).collect())],
            OpKind::Relu => {
                let x = parent(0).value.data();
                vec![(
                    0,
                    g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                )]
            }
            OpKind::Sigmoid => vec![(0, g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect())],
            OpKind::Softplus => {
                let x = parent(0).value.data();
                vec![(0, g.iter().zip(x).map(|(g, &x)| g * tensor::sigmoid(x)).collect())]
            }
            OpKind::SoftmaxRows => {
                let (rows, cols) = out.dims2().unwrap();
                let y = out.data();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                    for j in span {
                        dx[j] = y[j] * (g[j] - dot);
                    }
                }
                vec![(0, dx)]
            }
            OpKind::MeanAll => {
                let n = parent(0).value.numel();
                vec![(0, vec![g[0] / n as f64; n])]
            }
            OpKind::SumAll => vec![(0, vec![g[0]; parent(0).value.numel()])],
            OpKind::ConcatRows => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(node.parents.len());
                for slot in 0..node.parents.len() {
                    let n = parent(slot).value.numel();
                    if wants(slot) {
                        res.push((slot, g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
                res
            }
            OpKind::SliceRows { start, end } => {
                let input = &parent(0).value;
                let (_, cols) = input.dims2().unwrap();
                let mut dx = vec![0.0; input.numel()];
                dx[start * cols..end * cols].copy_from_slice(g);
                vec![(0, dx)]
            }
            OpKind::Transpose2d => {
                let (rows, cols) = out.dims2().unwrap();
                vec![(0, tensor::transpose(g, rows, cols))]
            }
            OpKind::Reshape(_) => vec![(0, g.to_vec())],
            OpKind::BroadcastAddRow => {
                let (_, cols) = out.dims2().unwrap();
                let mut db = vec![0.0; cols];
                for row in g.chunks(cols) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![(0, g.to_vec()), (1, db)]
            }
            OpKind::Gather { index, .. } => {
                let mut dx = vec![0.0; parent(0).value.numel()];
                for (&i, &gv) in index.iter().zip(g) {
                    dx[i] += gv;
                }
                vec![(0, dx)]
            }
        }
    }

    // Shorthands used by the model code.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::MulElem, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::DivElem, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Scale(s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Softplus, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::SoftmaxRows, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::SumAll, &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::MeanAll, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        self.apply(OpKind::ConcatRows, parts)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Transpose2d, &[a])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::BroadcastAddRow, &[a, row])
    }

    pub fn gather(&mut self, a: Var, shape: Vec<usize>, index: Arc<[usize]>) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Gather { shape, index }, &[a])
    }

    /// `x W + b` for a row-per-token matrix `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }
}

/// Gradients of a scalar with respect to every leaf of the tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    leaves: Vec<(usize, Tensor)>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Result<&Tensor, AutodiffError> {
        if var.tape != self.tape {
            return Err(AutodiffError::DetachedNode);
        }
        self.leaves
            .binary_search_by_key(&var.index, |(i, _)| *i)
            .map(|pos| &self.leaves[pos].1)
            .map_err(|_| AutodiffError::DetachedNode)
    }

    /// Number of nodes whose adjoint was propagated.
    pub fn visited(&self) -> usize {
        self.visited
    }
}
