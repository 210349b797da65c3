//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every value produced during a forward pass. Leaves are
//! copied in from [`Tensor`]s, each op appends a node, and [`Tape::backward`]
//! walks the nodes in exact reverse order of recording, accumulating adjoints.
//! Ops with no gradient-carrying input are evaluated but not recorded.
//!
//! Shapes have rank 0, 1 or 2 for every op except `reshape`. Elementwise binary
//! ops broadcast numpy-style: a rank-1 `[c]` operand acts as a `1×c` row and
//! any extent of 1 stretches to match.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::CholeskyFactor;

/// Dense row-major tensor, either a constant or a trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidOperand {
                op: "tensor",
                msg: format!("extents must be positive, got {shape:?}"),
            });
        }
        if numel(&shape) != data.len() {
            return Err(Error::InvalidOperand {
                op: "tensor",
                msg: format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// A trainable tensor; it accumulates gradients.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::new(shape, vec![0.0; n]).expect("positive extents")
    }

    pub fn scalar(x: f64) -> Self {
        Self::new(vec![], vec![x]).expect("scalar")
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if self.requires_grad {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    /// Adds `g` into the gradient buffer. Constants ignore the call.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        if !self.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row blocks, each solved against its own SPD factor. Rows outside every
/// block map to zero.
#[derive(Clone, Debug)]
pub struct BlockSolve {
    pub rows: usize,
    pub blocks: Vec<(usize, Arc<CholeskyFactor>)>,
}

impl BlockSolve {
    fn apply(&self, x: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (start, f) in &self.blocks {
            let range = start * cols..(start + f.n()) * cols;
            let mut buf = x[range.clone()].to_vec();
            f.solve_rows_in_place(&mut buf, cols);
            out[range].copy_from_slice(&buf);
        }
        out
    }
}

/// The closed set of differentiable operations.
#[derive(Clone, Debug)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Neg,
    Square,
    /// Sum over one axis, or over everything when `None`.
    Sum(Option<usize>),
    Mean(Option<usize>),
    ConcatRows,
    ConcatCols,
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    GatherRows(Vec<usize>),
    Softmax,
    LogSoftmax,
    Reshape(Vec<usize>),
    /// Sums each run of `k` consecutive rows.
    SumRowGroups(usize),
    Clamp { lo: f64, hi: f64 },
    /// `x ↦ K⁻¹ x` blockwise, with every `K` held constant.
    SpdSolve(Arc<BlockSolve>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Neg => "neg",
            OpKind::Square => "square",
            OpKind::Sum(_) => "sum",
            OpKind::Mean(_) => "mean",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Reshape(_) => "reshape",
            OpKind::SumRowGroups(_) => "sum_row_groups",
            OpKind::Clamp { .. } => "clamp",
            OpKind::SpdSolve(_) => "spd_solve",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses the parameter-free ops; `sum` and `mean` reduce over everything.
impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "matmul" => OpKind::MatMul,
            "tanh" => OpKind::Tanh,
            "sigmoid" => OpKind::Sigmoid,
            "exp" => OpKind::Exp,
            "log" => OpKind::Log,
            "neg" => OpKind::Neg,
            "square" => OpKind::Square,
            "sum" => OpKind::Sum(None),
            "mean" => OpKind::Mean(None),
            "concat_rows" => OpKind::ConcatRows,
            "concat_cols" => OpKind::ConcatCols,
            "softmax" => OpKind::Softmax,
            "log_softmax" => OpKind::LogSoftmax,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Option<(OpKind, Vec<Var>)>,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn as2d(shape: &[usize]) -> Option<(usize, usize)> {
    match shape.len() {
        0 => Some((1, 1)),
        1 => Some((1, shape[0])),
        2 => Some((shape[0], shape[1])),
        _ => None,
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    let (ar, ac) = as2d(a).ok_or_else(mismatch)?;
    let (br, bc) = as2d(b).ok_or_else(mismatch)?;
    let join = |x: usize, y: usize| -> Option<usize> {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    let r = join(ar, br).ok_or_else(mismatch)?;
    let c = join(ac, bc).ok_or_else(mismatch)?;
    Ok(match a.len().max(b.len()) {
        0 => vec![],
        1 => vec![c],
        _ => vec![r, c],
    })
}

/// Index of `(i, j)` in an operand broadcast from `(r, c)`.
#[inline]
fn bidx(r: usize, c: usize, i: usize, j: usize) -> usize {
    (if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, v) in orow.iter_mut().zip(row) {
            *o = (v - mx).exp();
            z += *o;
        }
        orow.iter_mut().for_each(|o| *o /= z);
    }
    out
}

fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for (o, v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

fn last_axis(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
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

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<(OpKind, Vec<Var>)>) -> Var {
        self.consumed = false;
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `t` onto the tape; it participates in gradients iff `t` does.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, None)
    }

    /// Copies `t` as a constant regardless of its flag.
    pub fn frozen(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), false, None)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, false, None))
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(vec![], vec![x], false, None)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n = numel(&shape);
        self.push(shape, vec![0.0; n], false, None)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape values are well formed")
    }

    /// Gradient of the last backward root with respect to `v`.
    ///
    /// `None` for constants or before any backward pass; zero-filled for
    /// gradient-carrying values the root does not reach.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g);
        }
    }

    /// Evaluates `op` on `inputs`; records it when any input carries a gradient.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        let name = op.name();
        let arity = match &op {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul => Some(2),
            OpKind::ConcatRows | OpKind::ConcatCols => None,
            _ => Some(1),
        };
        match arity {
            Some(k) if inputs.len() != k => {
                return Err(Error::InvalidOperand {
                    op: name,
                    msg: format!("expected {k} inputs, got {}", inputs.len()),
                })
            }
            None if inputs.is_empty() => {
                return Err(Error::InvalidOperand {
                    op: name,
                    msg: "expected at least one input".into(),
                })
            }
            _ => {}
        }
        let (shape, data) = self.forward(&op, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let record = requires_grad.then(|| (op, inputs.to_vec()));
        Ok(self.push(shape, data, requires_grad, record))
    }

    /// Name-addressed entry point for the parameter-free ops.
    pub fn forward_op(&mut self, name: &str, inputs: &[Var]) -> Result<Var> {
        let op: OpKind = name.parse()?;
        self.apply(op, inputs)
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::InvalidOperand {
                op,
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    fn forward(&self, op: &OpKind, inputs: &[Var]) -> Result<(Vec<usize>, Vec<f64>)> {
        let name = op.name();
        let x = &self.nodes[inputs[0].0];
        let unary = |f: &dyn Fn(f64) -> f64| (x.shape.clone(), x.data.iter().map(|v| f(*v)).collect());
        let bad_rank = || Error::InvalidOperand {
            op: name,
            msg: format!("unsupported rank for shape {:?}", x.shape),
        };
        Ok(match op {
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let y = &self.nodes[inputs[1].0];
                let shape = broadcast_shape(name, &x.shape, &y.shape)?;
                let f: fn(f64, f64) -> f64 = match op {
                    OpKind::Add => |a, b| a + b,
                    OpKind::Sub => |a, b| a - b,
                    _ => |a, b| a * b,
                };
                if x.shape == y.shape {
                    let data = x.data.iter().zip(&y.data).map(|(a, b)| f(*a, *b)).collect();
                    (shape, data)
                } else {
                    let (r, c) = as2d(&shape).expect("rank checked");
                    let (ar, ac) = as2d(&x.shape).expect("rank checked");
                    let (br, bc) = as2d(&y.shape).expect("rank checked");
                    let mut data = Vec::with_capacity(r * c);
                    for i in 0..r {
                        for j in 0..c {
                            data.push(f(x.data[bidx(ar, ac, i, j)], y.data[bidx(br, bc, i, j)]));
                        }
                    }
                    (shape, data)
                }
            }
            OpKind::MatMul => {
                let y = &self.nodes[inputs[1].0];
                let mismatch = || Error::ShapeMismatch {
                    op: name,
                    lhs: x.shape.clone(),
                    rhs: y.shape.clone(),
                };
                if x.shape.len() != 2 || y.shape.len() != 2 || x.shape[1] != y.shape[0] {
                    return Err(mismatch());
                }
                let (m, k, n) = (x.shape[0], x.shape[1], y.shape[1]);
                let mut out = vec![0.0; m * n];
                matmul_into(&x.data, &y.data, &mut out, m, k, n);
                (vec![m, n], out)
            }
            OpKind::Tanh => unary(&f64::tanh),
            OpKind::Sigmoid => unary(&|v| 1.0 / (1.0 + (-v).exp())),
            OpKind::Exp => unary(&f64::exp),
            OpKind::Log => unary(&f64::ln),
            OpKind::Neg => unary(&|v| -v),
            OpKind::Square => unary(&|v| v * v),
            OpKind::Clamp { lo, hi } => unary(&|v| v.clamp(*lo, *hi)),
            OpKind::Sum(axis) | OpKind::Mean(axis) => {
                let mean = matches!(op, OpKind::Mean(_));
                match axis {
                    None => {
                        let s: f64 = x.data.iter().sum();
                        let n = x.data.len() as f64;
                        (vec![], vec![if mean { s / n } else { s }])
                    }
                    Some(ax) => {
                        let (r, c) = as2d(&x.shape).ok_or_else(bad_rank)?;
                        let rank = x.shape.len();
                        if rank == 0 || *ax >= rank {
                            return Err(Error::InvalidOperand {
                                op: name,
                                msg: format!("axis {ax} out of range for shape {:?}", x.shape),
                            });
                        }
                        // For rank 1 the only axis is the column axis.
                        let over_rows = rank == 2 && *ax == 0;
                        if over_rows {
                            let mut out = vec![0.0; c];
                            for row in x.data.chunks(c) {
                                out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                            }
                            if mean {
                                out.iter_mut().for_each(|o| *o /= r as f64);
                            }
                            (vec![c], out)
                        } else {
                            let out: Vec<f64> = x
                                .data
                                .chunks(c)
                                .map(|row| {
                                    let s: f64 = row.iter().sum();
                                    if mean {
                                        s / c as f64
                                    } else {
                                        s
                                    }
                                })
                                .collect();
                            let shape = if rank == 2 { vec![r] } else { vec![] };
                            (shape, out)
                        }
                    }
                }
            }
            OpKind::ConcatRows => {
                let c = self.rank2(name, inputs[0])?.1;
                let mut rows = 0;
                let mut data = Vec::new();
                for v in inputs {
                    let (r, cc) = self.rank2(name, *v)?;
                    if cc != c {
                        return Err(Error::ShapeMismatch {
                            op: name,
                            lhs: x.shape.clone(),
                            rhs: self.nodes[v.0].shape.clone(),
                        });
                    }
                    rows += r;
                    data.extend_from_slice(&self.nodes[v.0].data);
                }
                (vec![rows, c], data)
            }
            OpKind::ConcatCols => {
                let r = self.rank2(name, inputs[0])?.0;
                let mut widths = Vec::with_capacity(inputs.len());
                for v in inputs {
                    let (rr, cc) = self.rank2(name, *v)?;
                    if rr != r {
                        return Err(Error::ShapeMismatch {
                            op: name,
                            lhs: x.shape.clone(),
                            rhs: self.nodes[v.0].shape.clone(),
                        });
                    }
                    widths.push(cc);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for (v, w) in inputs.iter().zip(&widths) {
                        data.extend_from_slice(&self.nodes[v.0].data[i * w..(i + 1) * w]);
                    }
                }
                (vec![r, total], data)
            }
            OpKind::SliceRows { start, len } => {
                let (r, c) = self.rank2(name, inputs[0])?;
                if *len == 0 || start + len > r {
                    return Err(Error::InvalidOperand {
                        op: name,
                        msg: format!("rows {start}..{} out of range for {r}", start + len),
                    });
                }
                (vec![*len, c], x.data[start * c..(start + len) * c].to_vec())
            }
            OpKind::SliceCols { start, len } => {
                let (r, c) = self.rank2(name, inputs[0])?;
                if *len == 0 || start + len > c {
                    return Err(Error::InvalidOperand {
                        op: name,
                        msg: format!("cols {start}..{} out of range for {c}", start + len),
                    });
                }
                let mut data = Vec::with_capacity(r * len);
                for row in x.data.chunks(c) {
                    data.extend_from_slice(&row[*start..start + len]);
                }
                (vec![r, *len], data)
            }
            OpKind::GatherRows(idx) => {
                let (r, c) = self.rank2(name, inputs[0])?;
                if idx.is_empty() {
                    return Err(Error::InvalidOperand {
                        op: name,
                        msg: "empty index list".into(),
                    });
                }
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    if i >= r {
                        return Err(Error::InvalidOperand {
                            op: name,
                            msg: format!("row {i} out of range for {r}"),
                        });
                    }
                    data.extend_from_slice(&x.data[i * c..(i + 1) * c]);
                }
                (vec![idx.len(), c], data)
            }
            OpKind::Softmax | OpKind::LogSoftmax => {
                if x.shape.is_empty() || x.shape.len() > 2 {
                    return Err(bad_rank());
                }
                let c = last_axis(&x.shape);
                let data = if matches!(op, OpKind::Softmax) {
                    softmax_rows(&x.data, c)
                } else {
                    log_softmax_rows(&x.data, c)
                };
                (x.shape.clone(), data)
            }
            OpKind::Reshape(shape) => {
                if numel(shape) != x.data.len() || shape.contains(&0) {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        lhs: x.shape.clone(),
                        rhs: shape.clone(),
                    });
                }
                (shape.clone(), x.data.clone())
            }
            OpKind::SumRowGroups(k) => {
                let (r, c) = self.rank2(name, inputs[0])?;
                if *k == 0 || r % k != 0 {
                    return Err(Error::InvalidOperand {
                        op: name,
                        msg: format!("{r} rows do not split into groups of {k}"),
                    });
                }
                let mut out = vec![0.0; (r / k) * c];
                for (i, row) in x.data.chunks(c).enumerate() {
                    let g = i / k;
                    out[g * c..(g + 1) * c].iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                (vec![r / k, c], out)
            }
            OpKind::SpdSolve(bs) => {
                let (r, c) = self.rank2(name, inputs[0])?;
                if r != bs.rows || bs.blocks.iter().any(|(s, f)| s + f.n() > r) {
                    return Err(Error::InvalidOperand {
                        op: name,
                        msg: format!("block layout does not fit {r} rows"),
                    });
                }
                (x.shape.clone(), bs.apply(&x.data, c))
            }
        })
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let rnode = &self.nodes[root.0];
        if rnode.data.len() != 1 {
            return Err(Error::NonScalarRoot(rnode.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if rnode.requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some((op, inputs)) = &self.nodes[i].op {
                self.backprop(i, op, inputs, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && g.is_none() {
                *g = Some(vec![0.0; node.data.len()]);
            }
        }
        self.grads = grads;
        self.consumed = true;
        Ok(())
    }

    fn backprop(&self, out_idx: usize, op: &OpKind, inputs: &[Var], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[out_idx];
        let node = |v: Var| &self.nodes[v.0];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()]);
            f(buf);
        };
        match op {
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (r, c) = as2d(&out.shape).expect("rank checked");
                let (ar, ac) = as2d(&node(a).shape).expect("rank checked");
                let (br, bc) = as2d(&node(b).shape).expect("rank checked");
                let (ad, bd) = (&node(a).data, &node(b).data);
                let sign_b = if matches!(op, OpKind::Sub) { -1.0 } else { 1.0 };
                let is_mul = matches!(op, OpKind::Mul);
                if wants(a) {
                    acc(a, &mut |ga| {
                        for i in 0..r {
                            for j in 0..c {
                                let gij = g[i * c + j];
                                let d = if is_mul { bd[bidx(br, bc, i, j)] } else { 1.0 };
                                ga[bidx(ar, ac, i, j)] += gij * d;
                            }
                        }
                    });
                }
                if wants(b) {
                    acc(b, &mut |gb| {
                        for i in 0..r {
                            for j in 0..c {
                                let gij = g[i * c + j];
                                let d = if is_mul { ad[bidx(ar, ac, i, j)] } else { sign_b };
                                gb[bidx(br, bc, i, j)] += gij * d;
                            }
                        }
                    });
                }
            }
            OpKind::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = (node(a).shape[0], node(a).shape[1]);
                let n = node(b).shape[1];
                let (ad, bd) = (&node(a).data, &node(b).data);
                acc(a, &mut |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            let brow = &mut gb[p * n..(p + 1) * n];
                            brow.iter_mut().zip(grow).for_each(|(o, x)| *o += aip * x);
                        }
                    }
                });
            }
            OpKind::Tanh | OpKind::Sigmoid | OpKind::Exp | OpKind::Log | OpKind::Neg | OpKind::Square | OpKind::Clamp { .. } => {
                let x = inputs[0];
                let xd = &node(x).data;
                let yd = &out.data;
                let deriv: Box<dyn Fn(usize) -> f64> = match op {
                    OpKind::Tanh => Box::new(|i| 1.0 - yd[i] * yd[i]),
                    OpKind::Sigmoid => Box::new(|i| yd[i] * (1.0 - yd[i])),
                    OpKind::Exp => Box::new(|i| yd[i]),
                    OpKind::Log => Box::new(|i| 1.0 / xd[i]),
                    OpKind::Neg => Box::new(|_| -1.0),
                    OpKind::Square => Box::new(|i| 2.0 * xd[i]),
                    OpKind::Clamp { lo, hi } => {
                        let (lo, hi) = (*lo, *hi);
                        Box::new(move |i| if xd[i] >= lo && xd[i] <= hi { 1.0 } else { 0.0 })
                    }
                    _ => unreachable!(),
                };
                acc(x, &mut |gx| {
                    for (i, gi) in g.iter().enumerate() {
                        gx[i] += gi * deriv(i);
                    }
                });
            }
            OpKind::Sum(axis) | OpKind::Mean(axis) => {
                let x = inputs[0];
                let xs = &node(x).shape;
                let n = node(x).data.len();
                let mean = matches!(op, OpKind::Mean(_));
                match axis {
                    None => {
                        let v = if mean { g[0] / n as f64 } else { g[0] };
                        acc(x, &mut |gx| gx.iter_mut().for_each(|o| *o += v));
                    }
                    Some(ax) => {
                        let (r, c) = as2d(xs).expect("rank checked");
                        let over_rows = xs.len() == 2 && *ax == 0;
                        acc(x, &mut |gx| {
                            for i in 0..r {
                                for j in 0..c {
                                    let (gi, cnt) = if over_rows { (g[j], r) } else { (g[i], c) };
                                    gx[i * c + j] += if mean { gi / cnt as f64 } else { gi };
                                }
                            }
                        });
                    }
                }
            }
            OpKind::ConcatRows => {
                let mut offset = 0;
                for &v in inputs {
                    let len = node(v).data.len();
                    acc(v, &mut |gv| gv.iter_mut().zip(&g[offset..offset + len]).for_each(|(o, x)| *o += x));
                    offset += len;
                }
            }
            OpKind::ConcatCols => {
                let (r, total) = (out.shape[0], out.shape[1]);
                let mut col = 0;
                for &v in inputs {
                    let w = node(v).shape[1];
                    acc(v, &mut |gv| {
                        for i in 0..r {
                            for j in 0..w {
                                gv[i * w + j] += g[i * total + col + j];
                            }
                        }
                    });
                    col += w;
                }
            }
            OpKind::SliceRows { start, len } => {
                let c = node(inputs[0]).shape[1];
                acc(inputs[0], &mut |gx| {
                    gx[start * c..(start + len) * c].iter_mut().zip(g).for_each(|(o, x)| *o += x);
                });
            }
            OpKind::SliceCols { start, len } => {
                let c = node(inputs[0]).shape[1];
                acc(inputs[0], &mut |gx| {
                    for (i, grow) in g.chunks(*len).enumerate() {
                        gx[i * c + start..i * c + start + len].iter_mut().zip(grow).for_each(|(o, x)| *o += x);
                    }
                });
            }
            OpKind::GatherRows(idx) => {
                let c = node(inputs[0]).shape[1];
                acc(inputs[0], &mut |gx| {
                    for (k, &i) in idx.iter().enumerate() {
                        gx[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]).for_each(|(o, x)| *o += x);
                    }
                });
            }
            OpKind::Softmax => {
                let c = last_axis(&out.shape);
                let y = &out.data;
                acc(inputs[0], &mut |gx| {
                    for ((grow, yrow), gxrow) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxrow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            OpKind::LogSoftmax => {
                let c = last_axis(&out.shape);
                let y = &out.data;
                acc(inputs[0], &mut |gx| {
                    for ((grow, yrow), gxrow) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let total: f64 = grow.iter().sum();
                        for j in 0..c {
                            gxrow[j] += grow[j] - yrow[j].exp() * total;
                        }
                    }
                });
            }
            OpKind::Reshape(_) => {
                acc(inputs[0], &mut |gx| gx.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            OpKind::SumRowGroups(k) => {
                let c = node(inputs[0]).shape[1];
                acc(inputs[0], &mut |gx| {
                    for (i, row) in gx.chunks_mut(c).enumerate() {
                        let grp = i / k;
                        row.iter_mut().zip(&g[grp * c..(grp + 1) * c]).for_each(|(o, x)| *o += x);
                    }
                });
            }
            OpKind::SpdSolve(bs) => {
                let c = node(inputs[0]).shape[1];
                let solved = bs.apply(g, c);
                acc(inputs[0], &mut |gx| gx.iter_mut().zip(&solved).for_each(|(o, x)| *o += x));
            }
        }
    }
}

macro_rules! binary_ops {
    ($($fn_name:ident => $kind:ident),* $(,)?) => {
        impl Tape {
            $(
                pub fn $fn_name(&mut self, a: Var, b: Var) -> Result<Var> {
                    self.apply(OpKind::$kind, &[a, b])
                }
            )*
        }
    };
}

macro_rules! unary_ops {
    ($($fn_name:ident => $kind:ident),* $(,)?) => {
        impl Tape {
            $(
                pub fn $fn_name(&mut self, x: Var) -> Result<Var> {
                    self.apply(OpKind::$kind, &[x])
                }
            )*
        }
    };
}

binary_ops! {
    add => Add,
    sub => Sub,
    mul => Mul,
    matmul => MatMul,
}

unary_ops! {
    tanh => Tanh,
    sigmoid => Sigmoid,
    exp => Exp,
    log => Log,
    neg => Neg,
    square => Square,
    softmax => Softmax,
    log_softmax => LogSoftmax,
}

impl Tape {
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sum(None), &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Sum(Some(axis)), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Mean(None), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Mean(Some(axis)), &[x])
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatRows, xs)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatCols, xs)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(OpKind::SliceRows { start, len }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(OpKind::SliceCols { start, len }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::GatherRows(idx), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::Reshape(shape), &[x])
    }

    pub fn sum_row_groups(&mut self, x: Var, k: usize) -> Result<Var> {
        self.apply(OpKind::SumRowGroups(k), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(OpKind::Clamp { lo, hi }, &[x])
    }

    pub fn spd_solve(&mut self, x: Var, blocks: Arc<BlockSolve>) -> Result<Var> {
        self.apply(OpKind::SpdSolve(blocks), &[x])
    }

    /// `x · c` for a constant scalar `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(x, s)
    }

    /// `x + c` for a constant scalar `c`.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.add(x, s)
    }
}
