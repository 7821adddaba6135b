use std::cell::RefCell;

use super::tensor::{matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Sigmoid,
    Exp,
    Log,
    Square,
    Sqrt,
    SqrtFloor(f64),
    Tanh,
    Relu,
    LogSigmoid,
    Recip,
    Scale(f64),
    Shift(f64),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Bcast, Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Reduce {
        kind: Reduce,
        x: Var,
        layout: (usize, usize, usize),
        argmax: Vec<usize>,
    },
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Var, Var),
    Diag(Var),
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        probs: Vec<f64>,
        scale: f64,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Unary(_, x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Reduce { x, .. }
            | Op::Gather(x, _)
            | Op::Diag(x)
            | Op::LogSoftmaxRows(x)
            | Op::LayerNormRows { x, .. } => vec![*x],
            Op::Binary(_, _, a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b)
            | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Every operation appends a node; [`Graph::backward`]
/// sweeps the nodes in reverse creation order, which is a topological order
/// because parents always precede their children.
///
/// Gradients of leaves accumulate across repeated `backward` calls until
/// [`Graph::zero_grad`] is called.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<Vec<Option<Vec<f64>>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Trainable leaf: gradients accumulate into it.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Frozen input: never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.leaf_grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        let shape = self.shape(v);
        Some(Tensor::new(shape, g.clone()).expect("gradient shape"))
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    // ---- elementwise ----------------------------------------------------

    fn unary(&self, kind: Unary, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let mut out = Vec::with_capacity(xv.numel());
            for &a in xv.data() {
                let y = match kind {
                    Unary::Neg => -a,
                    Unary::Sigmoid => sigmoid(a),
                    Unary::Exp => a.exp(),
                    Unary::Log => {
                        if a <= 0.0 || a.is_nan() {
                            return Err(Error::Domain { op: "log", value: a });
                        }
                        a.ln()
                    }
                    Unary::Square => a * a,
                    Unary::Sqrt => {
                        if a <= 0.0 || a.is_nan() {
                            return Err(Error::Domain { op: "sqrt", value: a });
                        }
                        a.sqrt()
                    }
                    Unary::SqrtFloor(floor) => a.max(floor).sqrt(),
                    Unary::Tanh => a.tanh(),
                    Unary::Relu => a.max(0.0),
                    Unary::LogSigmoid => a.min(0.0) - (-a.abs()).exp().ln_1p(),
                    Unary::Recip => {
                        if a == 0.0 {
                            return Err(Error::Domain { op: "recip", value: a });
                        }
                        1.0 / a
                    }
                    Unary::Scale(c) => a * c,
                    Unary::Shift(c) => a + c,
                };
                out.push(y);
            }
            Tensor::new(xv.shape().to_vec(), out)?
        };
        Ok(self.push(value, Op::Unary(kind, x)))
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }
    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }
    /// Natural log; non-positive input is a domain error.
    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }
    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }
    /// Square root; non-positive input is a domain error.
    pub fn sqrt(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }
    /// `sqrt(max(x, floor))`, with zero gradient where the floor is active.
    pub fn sqrt_floor(&self, x: Var, floor: f64) -> Result<Var> {
        self.unary(Unary::SqrtFloor(floor.max(0.0)), x)
    }
    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }
    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }
    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(Unary::LogSigmoid, x)
    }
    pub fn recip(&self, x: Var) -> Result<Var> {
        self.unary(Unary::Recip, x)
    }
    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }
    pub fn shift(&self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Shift(c), x)
    }

    fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (value, bc) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let bc = if av.shape() == bv.shape() {
                Bcast::Same
            } else if av.is_scalar() {
                Bcast::LhsScalar
            } else if bv.is_scalar() {
                Bcast::RhsScalar
            } else {
                return Err(Error::shape(binary_name(kind), av.shape(), bv.shape()));
            };
            let shape = if bc == Bcast::LhsScalar { bv.shape() } else { av.shape() };
            let n = shape.iter().product::<usize>();
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let x = if bc == Bcast::LhsScalar {
                    av.data()[0]
                } else {
                    av.data()[i]
                };
                let y = if bc == Bcast::RhsScalar {
                    bv.data()[0]
                } else {
                    bv.data()[i]
                };
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => {
                        if y == 0.0 {
                            return Err(Error::Domain { op: "div", value: y });
                        }
                        x / y
                    }
                });
            }
            (Tensor::new(shape.to_vec(), out)?, bc)
        };
        Ok(self.push(value, Op::Binary(kind, bc, a, b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    /// Elementwise division; a zero divisor is a domain error.
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)?
        };
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let value = self.nodes.borrow()[x.0].value.transpose()?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// `x · w + b` with `b` added to every row.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    // ---- reductions -----------------------------------------------------

    fn reduce(&self, kind: Reduce, x: Var, axis: Option<usize>) -> Result<Var> {
        let (value, layout, argmax) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let shape = xv.shape();
            let (outer, n, inner, out_shape) = match axis {
                None => (1, xv.numel(), 1, Vec::new()),
                Some(ax) => {
                    if ax >= shape.len() {
                        return Err(Error::Axis {
                            axis: ax,
                            rank: shape.len(),
                        });
                    }
                    let outer = shape[..ax].iter().product();
                    let inner = shape[ax + 1..].iter().product();
                    let mut out_shape = shape.to_vec();
                    out_shape.remove(ax);
                    (outer, shape[ax], inner, out_shape)
                }
            };
            let data = xv.data();
            let mut out = vec![0.0; outer * inner];
            let mut argmax = Vec::new();
            if kind == Reduce::Max {
                argmax = vec![0; outer * inner];
            }
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| data[(o * n + j) * inner + i];
                    let slot = o * inner + i;
                    match kind {
                        Reduce::Sum | Reduce::Mean => {
                            let s: f64 = (0..n).map(at).sum();
                            out[slot] = if kind == Reduce::Mean { s / n as f64 } else { s };
                        }
                        Reduce::Max => {
                            let mut best = 0;
                            for j in 1..n {
                                if at(j) > at(best) {
                                    best = j;
                                }
                            }
                            argmax[slot] = best;
                            out[slot] = at(best);
                        }
                    }
                }
            }
            let value = if out_shape.is_empty() {
                Tensor::scalar(out[0])
            } else {
                Tensor::new(out_shape, out)?
            };
            (value, (outer, n, inner), argmax)
        };
        Ok(self.push(
            value,
            Op::Reduce {
                kind,
                x,
                layout,
                argmax,
            },
        ))
    }

    /// Sum over all elements (`axis = None`) or along one axis.
    pub fn sum(&self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Sum, x, axis)
    }
    pub fn mean(&self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Mean, x, axis)
    }
    /// Maximum; the gradient goes to the first maximal position.
    pub fn max(&self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Max, x, axis)
    }

    // ---- row/column broadcasting ---------------------------------------

    fn row_vec_op(&self, x: Var, v: Var, name: &'static str) -> Result<(usize, usize)> {
        let nodes = self.nodes.borrow();
        let (xv, vv) = (&nodes[x.0].value, &nodes[v.0].value);
        if xv.rank() != 2 || vv.numel() != xv.shape()[1] {
            return Err(Error::shape(name, xv.shape(), vv.shape()));
        }
        Ok((xv.shape()[0], xv.shape()[1]))
    }

    /// Adds vector `b` (length n) to every row of `x` (m×n).
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.row_vec_op(x, b, "add_row")?;
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (nodes[x.0].value.data(), nodes[b.0].value.data());
            let out = (0..m * n).map(|i| xv[i] + bv[i % n]).collect();
            Tensor::matrix(m, n, out)
        };
        Ok(self.push(value, Op::AddRow(x, b)))
    }

    /// Multiplies every row of `x` (m×n) elementwise by vector `s` (length n).
    pub fn mul_row(&self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.row_vec_op(x, s, "mul_row")?;
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, sv) = (nodes[x.0].value.data(), nodes[s.0].value.data());
            let out = (0..m * n).map(|i| xv[i] * sv[i % n]).collect();
            Tensor::matrix(m, n, out)
        };
        Ok(self.push(value, Op::MulRow(x, s)))
    }

    /// Scales row `i` of `x` (m×n) by `s[i]` (length m).
    pub fn mul_col(&self, x: Var, s: Var) -> Result<Var> {
        let (m, n, value) = {
            let nodes = self.nodes.borrow();
            let (xv, sv) = (&nodes[x.0].value, &nodes[s.0].value);
            if xv.rank() != 2 || sv.numel() != xv.shape()[0] {
                return Err(Error::shape("mul_col", xv.shape(), sv.shape()));
            }
            let (m, n) = (xv.shape()[0], xv.shape()[1]);
            let out = (0..m * n).map(|i| xv.data()[i] * sv.data()[i / n]).collect();
            (m, n, out)
        };
        Ok(self.push(Tensor::matrix(m, n, value), Op::MulCol(x, s)))
    }

    // ---- indexing -------------------------------------------------------

    /// Selects rows of a 2-D tensor; repeated ids are allowed.
    pub fn gather(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.0].value;
            if t.rank() != 2 {
                return Err(Error::shape("gather", t.shape(), &[]));
            }
            if ids.is_empty() {
                return Err(Error::Contract("gather with no ids".into()));
            }
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            let mut out = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(Error::Index { index: id, len: rows });
                }
                out.extend_from_slice(t.row(id));
            }
            Tensor::matrix(ids.len(), cols, out)
        };
        Ok(self.push(value, Op::Gather(table, ids.to_vec())))
    }

    /// `[a | b]`: concatenation along columns.
    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.rank() != 2 || bv.rank() != 2 || av.shape()[0] != bv.shape()[0] {
                return Err(Error::shape("concat_cols", av.shape(), bv.shape()));
            }
            let (m, p, q) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut out = Vec::with_capacity(m * (p + q));
            for r in 0..m {
                out.extend_from_slice(av.row(r));
                out.extend_from_slice(bv.row(r));
            }
            Tensor::matrix(m, p + q, out)
        };
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    pub fn diag(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.rank() != 2 || xv.shape()[0] != xv.shape()[1] {
                return Err(Error::shape("diag", xv.shape(), &[]));
            }
            let n = xv.shape()[0];
            Tensor::vector((0..n).map(|i| xv.get(i, i)).collect())
        };
        Ok(self.push(value, Op::Diag(x)))
    }

    // ---- fused kernels --------------------------------------------------

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax_rows(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.rank() != 2 {
                return Err(Error::shape("log_softmax_rows", xv.shape(), &[]));
            }
            let (m, n) = (xv.shape()[0], xv.shape()[1]);
            let mut out = Vec::with_capacity(m * n);
            for r in 0..m {
                let row = xv.row(r);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|v| v - lse));
            }
            Tensor::matrix(m, n, out)
        };
        Ok(self.push(value, Op::LogSoftmaxRows(x)))
    }

    /// Normalizes each row to zero mean and unit (population) variance,
    /// without the affine scale/offset.
    pub fn layer_norm_rows(&self, x: Var, eps: f64) -> Result<Var> {
        let (value, inv_std) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.rank() != 2 {
                return Err(Error::shape("layer_norm_rows", xv.shape(), &[]));
            }
            let (m, n) = (xv.shape()[0], xv.shape()[1]);
            let mut out = Vec::with_capacity(m * n);
            let mut inv_std = Vec::with_capacity(m);
            for r in 0..m {
                let row = xv.row(r);
                let mu = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                out.extend(row.iter().map(|v| (v - mu) * inv));
                inv_std.push(inv);
            }
            (Tensor::matrix(m, n, out), inv_std)
        };
        Ok(self.push(value, Op::LayerNormRows { x, inv_std }))
    }

    /// Causal scaled dot-product attention over packed sequences.
    ///
    /// `segments` lists `(start_row, len)` blocks of the N rows of `q`, `k`
    /// and `v`; a row attends to rows of its own segment at or before itself.
    pub fn causal_attention(&self, q: Var, k: Var, v: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (value, probs, scale) = {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            if qv.rank() != 2 || qv.shape() != kv.shape() {
                return Err(Error::shape("attention", qv.shape(), kv.shape()));
            }
            if vv.rank() != 2 || vv.shape()[0] != qv.shape()[0] {
                return Err(Error::shape("attention", qv.shape(), vv.shape()));
            }
            let rows = qv.shape()[0];
            let dk = qv.shape()[1];
            let dv = vv.shape()[1];
            check_segments(segments, rows)?;
            let scale = 1.0 / (dk as f64).sqrt();
            let mut out = vec![0.0; rows * dv];
            let mut probs = Vec::new();
            let mut scores = Vec::new();
            for &(start, len) in segments {
                for i in 0..len {
                    let qi = qv.row(start + i);
                    scores.clear();
                    for j in 0..=i {
                        let kj = kv.row(start + j);
                        scores.push(scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>());
                    }
                    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                    let out_row = &mut out[(start + i) * dv..(start + i + 1) * dv];
                    for (j, s) in scores.iter().enumerate() {
                        let p = (s - mx).exp() / z;
                        probs.push(p);
                        for (o, &x) in out_row.iter_mut().zip(vv.row(start + j)) {
                            *o += p * x;
                        }
                    }
                }
            }
            (Tensor::matrix(rows, dv, out), probs, scale)
        };
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                probs,
                scale,
            },
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates d`loss`/d`leaf` into every trainable leaf reachable from
    /// the scalar `loss`. Calling it twice without [`Graph::zero_grad`]
    /// doubles the stored gradients.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize(nodes.len(), None);
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let y = node.value.data();
            let mut send = |p: Var, contrib: Vec<f64>| {
                if nodes[p.0].requires_grad {
                    accumulate(&mut adj[p.0], contrib);
                }
            };
            match &node.op {
                Op::Leaf => accumulate(&mut leaf_grads[id], g),
                Op::Unary(kind, x) => {
                    let xv = nodes[x.0].value.data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .zip(y)
                        .map(|((&g, &x), &y)| g * unary_derivative(*kind, x, y))
                        .collect();
                    send(*x, dx);
                }
                Op::Binary(kind, bc, a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let mut da = vec![0.0; av.len()];
                    let mut db = vec![0.0; bv.len()];
                    for (i, &gi) in g.iter().enumerate() {
                        let ia = if *bc == Bcast::LhsScalar { 0 } else { i };
                        let ib = if *bc == Bcast::RhsScalar { 0 } else { i };
                        let (x, z) = (av[ia], bv[ib]);
                        let (ga, gb) = match kind {
                            Binary::Add => (gi, gi),
                            Binary::Sub => (gi, -gi),
                            Binary::Mul => (gi * z, gi * x),
                            Binary::Div => (gi / z, -gi * x / (z * z)),
                        };
                        da[ia] += ga;
                        db[ib] += gb;
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if nodes[a.0].requires_grad {
                        send(*a, matmul_nt(&g, bv.data(), m, n, k));
                    }
                    if nodes[b.0].requires_grad {
                        send(*b, matmul_tn(av.data(), &g, m, k, n));
                    }
                }
                Op::Transpose(x) => {
                    let s = node.value.shape();
                    let gt = Tensor::matrix(s[0], s[1], g).transpose()?;
                    send(*x, gt.into_data());
                }
                Op::Reshape(x) => send(*x, g),
                Op::Reduce {
                    kind,
                    x,
                    layout: (outer, n, inner),
                    argmax,
                } => {
                    let mut dx = vec![0.0; outer * n * inner];
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let slot = o * inner + i;
                            match kind {
                                Reduce::Sum | Reduce::Mean => {
                                    let c = if *kind == Reduce::Mean {
                                        g[slot] / *n as f64
                                    } else {
                                        g[slot]
                                    };
                                    for j in 0..*n {
                                        dx[(o * n + j) * inner + i] = c;
                                    }
                                }
                                Reduce::Max => dx[(o * n + argmax[slot]) * inner + i] = g[slot],
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::AddRow(x, b) => {
                    let n = nodes[b.0].value.numel();
                    let mut db = vec![0.0; n];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % n] += gi;
                    }
                    send(*x, g);
                    send(*b, db);
                }
                Op::MulRow(x, s) => {
                    let (xv, sv) = (nodes[x.0].value.data(), nodes[s.0].value.data());
                    let n = sv.len();
                    let mut ds = vec![0.0; n];
                    let mut dx = vec![0.0; g.len()];
                    for (i, gi) in g.iter().enumerate() {
                        ds[i % n] += gi * xv[i];
                        dx[i] = gi * sv[i % n];
                    }
                    send(*x, dx);
                    send(*s, ds);
                }
                Op::MulCol(x, s) => {
                    let (xv, sv) = (nodes[x.0].value.data(), nodes[s.0].value.data());
                    let n = g.len() / sv.len();
                    let mut ds = vec![0.0; sv.len()];
                    let mut dx = vec![0.0; g.len()];
                    for (i, gi) in g.iter().enumerate() {
                        ds[i / n] += gi * xv[i];
                        dx[i] = gi * sv[i / n];
                    }
                    send(*x, dx);
                    send(*s, ds);
                }
                Op::Gather(table, ids) => {
                    let t = &nodes[table.0].value;
                    let cols = t.shape()[1];
                    let mut dt = vec![0.0; t.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            dt[id * cols + c] += g[r * cols + c];
                        }
                    }
                    send(*table, dt);
                }
                Op::ConcatCols(a, b) => {
                    let p = nodes[a.0].value.shape()[1];
                    let q = nodes[b.0].value.shape()[1];
                    let m = g.len() / (p + q);
                    let mut da = Vec::with_capacity(m * p);
                    let mut db = Vec::with_capacity(m * q);
                    for r in 0..m {
                        let row = &g[r * (p + q)..(r + 1) * (p + q)];
                        da.extend_from_slice(&row[..p]);
                        db.extend_from_slice(&row[p..]);
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::Diag(x) => {
                    let n = g.len();
                    let mut dx = vec![0.0; n * n];
                    for i in 0..n {
                        dx[i * n + i] = g[i];
                    }
                    send(*x, dx);
                }
                Op::LogSoftmaxRows(x) => {
                    let n = node.value.shape()[1];
                    let mut dx = vec![0.0; g.len()];
                    for (r, (gr, yr)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..n {
                            dx[r * n + j] = gr[j] - yr[j].exp() * gs;
                        }
                    }
                    send(*x, dx);
                }
                Op::LayerNormRows { x, inv_std } => {
                    let n = node.value.shape()[1];
                    let mut dx = vec![0.0; g.len()];
                    for (r, (gr, yr)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[r * n + j] = inv_std[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    send(*x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    segments,
                    probs,
                    scale,
                } => {
                    let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                    let dk = qv.shape()[1];
                    let dvw = vv.shape()[1];
                    let mut dq = vec![0.0; qv.numel()];
                    let mut dkk = vec![0.0; kv.numel()];
                    let mut dv = vec![0.0; vv.numel()];
                    let mut dp = Vec::new();
                    let mut off = 0;
                    for &(start, len) in segments {
                        for i in 0..len {
                            let row = start + i;
                            let gi = &g[row * dvw..(row + 1) * dvw];
                            let p = &probs[off..off + i + 1];
                            off += i + 1;
                            dp.clear();
                            for j in 0..=i {
                                let vj = vv.row(start + j);
                                dp.push(gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                                for c in 0..dvw {
                                    dv[(start + j) * dvw + c] += p[j] * gi[c];
                                }
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            let qi = qv.row(row);
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = kv.row(start + j);
                                for c in 0..dk {
                                    dq[row * dk + c] += ds * kj[c];
                                    dkk[(start + j) * dk + c] += ds * qi[c];
                                }
                            }
                        }
                    }
                    send(*q, dq);
                    send(*k, dkk);
                    send(*v, dv);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn check_segments(segments: &[(usize, usize)], rows: usize) -> Result<()> {
    let mut covered = 0;
    for &(start, len) in segments {
        if len == 0 || start + len > rows {
            return Err(Error::Contract(format!(
                "attention segment ({start}, {len}) outside {rows} rows"
            )));
        }
        covered += len;
    }
    if covered != rows {
        return Err(Error::Contract(format!(
            "attention segments cover {covered} of {rows} rows"
        )));
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Neg => -1.0,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Square => 2.0 * x,
        Unary::Sqrt => 0.5 / y,
        Unary::SqrtFloor(floor) => {
            if x > floor && y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        }
        Unary::Tanh => 1.0 - y * y,
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::LogSigmoid => sigmoid(-x),
        Unary::Recip => -y * y,
        Unary::Scale(c) => c,
        Unary::Shift(_) => 1.0,
    }
}

fn binary_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
        Binary::Div => "div",
    }
}
