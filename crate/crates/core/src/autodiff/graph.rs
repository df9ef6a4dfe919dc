use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{AutodiffError, Tensor};
use crate::scalar::{self, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    ScaleRows(Var, Var),
    Scale(Var, S),
    AddConst(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    SumAll(Var),
    WeightedSum(Var, Vec<S>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    Softmax(Var),
    LogSoftmax(Var),
    Transpose(Var),
    Reshape(Var),
    TileRows(Var, usize),
    SumBlocks(Var, usize),
    Div(Var, Var, Bcast),
    CausalUnfold { x: Var, batch: usize, kernel: usize },
    StopGradient,
    StraightThrough(Var),
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Dynamic computation graph, rebuilt for every training step.
///
/// Not `Sync`: one graph belongs to one step on one thread.
pub struct Graph<S> {
    nodes: RefCell<Vec<Node<S>>>,
    params: RefCell<Vec<(String, Var)>>,
    param_index: RefCell<HashMap<String, Var>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

type OpResult = Result<Var, AutodiffError>;

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            param_index: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter once per graph; later calls return the same node.
    pub fn param(&self, name: &str, value: &Tensor<S>) -> Var {
        if let Some(&v) = self.param_index.borrow().get(name) {
            return v;
        }
        let v = self.leaf(value.clone());
        self.param_index.borrow_mut().insert(name.to_string(), v);
        self.params.borrow_mut().push((name.to_string(), v));
        v
    }

    /// Names of parameters bound so far, in binding order.
    pub fn bound_params(&self) -> Vec<(String, Var)> {
        self.params.borrow().clone()
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> S {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient. Differentiable leaves always report a gradient
    /// (zeros when unreachable from the loss); constants report `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        match &n.grad {
            Some(g) => Some(Tensor::new(n.value.rows(), n.value.cols(), g.clone()).expect("grad shape")),
            None if n.requires_grad => Some(Tensor::zeros(n.value.rows(), n.value.cols())),
            None => None,
        }
    }

    /// Gradients of every bound parameter, keyed by name.
    pub fn param_grads(&self) -> Vec<(String, Tensor<S>)> {
        self.bound_params()
            .into_iter()
            .map(|(name, v)| (name, self.grad(v).expect("params require grad")))
            .collect()
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&self, a: Var, b: Var) -> OpResult {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.cols() != bv.rows() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: av.shape(),
                    rhs: bv.shape(),
                });
            }
            let mut out = Tensor::zeros(av.rows(), bv.cols());
            matmul_acc(av.data(), bv.data(), out.data_mut(), av.rows(), av.cols(), bv.cols());
            out
        };
        Ok(self.push(out, Op::MatMul(a, b), self.needs(&[a, b])))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if sb == [1, 1] {
            Ok(Bcast::Scalar)
        } else if sb[0] == 1 && sb[1] == sa[1] {
            Ok(Bcast::Row)
        } else {
            Err(AutodiffError::ShapeMismatch { op, lhs: sa, rhs: sb })
        }
    }

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<(Tensor<S>, Bcast), AutodiffError> {
        let bc = self.bcast(op, a, b)?;
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        let cols = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Bcast::Same => bv.data()[i],
                    Bcast::Row => bv.data()[i % cols],
                    Bcast::Scalar => bv.data()[0],
                };
                f(x, y)
            })
            .collect();
        Ok((Tensor::new(av.rows(), cols, data)?, bc))
    }

    pub fn add(&self, a: Var, b: Var) -> OpResult {
        let (out, bc) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b, bc), self.needs(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> OpResult {
        let (out, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b, bc), self.needs(&[a, b])))
    }

    /// Element-wise product.
    pub fn mul(&self, a: Var, b: Var) -> OpResult {
        let (out, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b, bc), self.needs(&[a, b])))
    }

    /// Element-wise quotient.
    pub fn div(&self, a: Var, b: Var) -> OpResult {
        let (out, bc) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b, bc), self.needs(&[a, b])))
    }

    /// Multiplies row `i` of `x` by `c[i]`, with `c` of shape `rows × 1`.
    pub fn scale_rows(&self, x: Var, c: Var) -> OpResult {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, cv) = (&nodes[x.0].value, &nodes[c.0].value);
            if cv.shape() != [xv.rows(), 1] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "scale_rows",
                    lhs: xv.shape(),
                    rhs: cv.shape(),
                });
            }
            let mut out = xv.clone();
            for r in 0..xv.rows() {
                let s = cv.data()[r];
                out.row_slice_mut(r).iter_mut().for_each(|v| *v *= s);
            }
            out
        };
        Ok(self.push(out, Op::ScaleRows(x, c), self.needs(&[x, c])))
    }

    pub fn scale(&self, x: Var, s: S) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), self.needs(&[x]))
    }

    pub fn add_const(&self, x: Var, s: S) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddConst(x), self.needs(&[x]))
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -S::one())
    }

    fn unary(&self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let out = self.value(x).map(f);
        self.push(out, op, self.needs(&[x]))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, scalar::sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    /// Natural log; non-positive inputs are a domain error.
    pub fn log(&self, x: Var) -> OpResult {
        if self.value(x).data().iter().any(|&v| !(v > S::zero()) || !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: "log" });
        }
        Ok(self.unary(x, |v| v.ln(), Op::Log(x)))
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, scalar::softplus, Op::Softplus(x))
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Sum of all elements, as `1 × 1`.
    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), self.needs(&[x]))
    }

    /// `Σ_i w_i Σ_j x_ij`, one weight per row. Zero weights mask rows out.
    pub fn weighted_sum(&self, x: Var, weights: &[S]) -> OpResult {
        let s = {
            let xv = self.value(x);
            if weights.len() != xv.rows() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: xv.shape(),
                    rhs: [weights.len(), 1],
                });
            }
            let mut s = S::zero();
            for (r, &w) in weights.iter().enumerate() {
                if w != S::zero() {
                    s += w * xv.row_slice(r).iter().copied().sum::<S>();
                }
            }
            s
        };
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights.to_vec()), self.needs(&[x])))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> OpResult {
        let out = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| AutodiffError::Contract("concat of nothing".into()))?;
            let rows = nodes[first.0].value.rows();
            let mut cols = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.rows() != rows {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat_cols",
                        lhs: nodes[first.0].value.shape(),
                        rhs: v.shape(),
                    });
                }
                cols += v.cols();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row_slice(r));
                }
            }
            Tensor::new(rows, cols, data)?
        };
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), self.needs(parts)))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> OpResult {
        let out = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| AutodiffError::Contract("concat of nothing".into()))?;
            let cols = nodes[first.0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.cols() != cols {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat_rows",
                        lhs: nodes[first.0].value.shape(),
                        rhs: v.shape(),
                    });
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::new(rows, cols, data)?
        };
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), self.needs(parts)))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> OpResult {
        let out = {
            let xv = self.value(x);
            if start > end || end > xv.cols() {
                return Err(AutodiffError::Contract(format!(
                    "column slice {start}..{end} out of range for {:?}",
                    xv.shape()
                )));
            }
            let mut data = Vec::with_capacity(xv.rows() * (end - start));
            for r in 0..xv.rows() {
                data.extend_from_slice(&xv.row_slice(r)[start..end]);
            }
            Tensor::new(xv.rows(), end - start, data)?
        };
        Ok(self.push(out, Op::SliceCols(x, start), self.needs(&[x])))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> OpResult {
        let out = {
            let xv = self.value(x);
            if start > end || end > xv.rows() {
                return Err(AutodiffError::Contract(format!(
                    "row slice {start}..{end} out of range for {:?}",
                    xv.shape()
                )));
            }
            let c = xv.cols();
            Tensor::new(end - start, c, xv.data()[start * c..end * c].to_vec())?
        };
        Ok(self.push(out, Op::SliceRows(x, start), self.needs(&[x])))
    }

    /// Row lookup, e.g. embeddings: output row `r` is `table[idx[r]]`.
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> OpResult {
        let out = {
            let tv = self.value(table);
            let mut data = Vec::with_capacity(idx.len() * tv.cols());
            for &i in idx {
                if i >= tv.rows() {
                    return Err(AutodiffError::Contract(format!(
                        "row index {i} out of range for {} rows",
                        tv.rows()
                    )));
                }
                data.extend_from_slice(tv.row_slice(i));
            }
            Tensor::new(idx.len(), tv.cols(), data)?
        };
        Ok(self.push(out, Op::GatherRows(table, idx.to_vec()), self.needs(&[table])))
    }

    /// Picks `x[r, idx[r]]` for every row; output is `rows × 1`.
    pub fn gather_cols(&self, x: Var, idx: &[usize]) -> OpResult {
        let out = {
            let xv = self.value(x);
            if idx.len() != xv.rows() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "gather_cols",
                    lhs: xv.shape(),
                    rhs: [idx.len(), 1],
                });
            }
            let mut data = Vec::with_capacity(idx.len());
            for (r, &c) in idx.iter().enumerate() {
                if c >= xv.cols() {
                    return Err(AutodiffError::Contract(format!(
                        "column index {c} out of range for {} columns",
                        xv.cols()
                    )));
                }
                data.push(xv.get(r, c));
            }
            Tensor::new(idx.len(), 1, data)?
        };
        Ok(self.push(out, Op::GatherCols(x, idx.to_vec()), self.needs(&[x])))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&self, x: Var) -> OpResult {
        self.masked_softmax(x, None)
    }

    /// Row-wise softmax where `mask[i] == false` entries behave as `-∞` and
    /// receive exactly zero probability. A fully masked row is an error.
    pub fn masked_softmax(&self, x: Var, mask: Option<&[bool]>) -> OpResult {
        let out = {
            let xv = self.value(x);
            if let Some(m) = mask {
                if m.len() != xv.len() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "masked_softmax",
                        lhs: xv.shape(),
                        rhs: [m.len(), 1],
                    });
                }
            }
            let cols = xv.cols();
            let mut out = Tensor::zeros(xv.rows(), cols);
            for r in 0..xv.rows() {
                let row = xv.row_slice(r);
                let keep = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
                let mut mx = S::neg_infinity();
                let mut any = false;
                for (c, &v) in row.iter().enumerate() {
                    if keep(c) {
                        if !v.is_finite() {
                            return Err(AutodiffError::NonFinite { op: "softmax" });
                        }
                        any = true;
                        mx = mx.max(v);
                    }
                }
                if !any {
                    return Err(AutodiffError::Contract(format!("softmax row {r} is fully masked")));
                }
                let orow = out.row_slice_mut(r);
                let mut z = S::zero();
                for (c, &v) in row.iter().enumerate() {
                    if keep(c) {
                        let e = (v - mx).exp();
                        orow[c] = e;
                        z += e;
                    }
                }
                orow.iter_mut().for_each(|v| *v /= z);
            }
            out
        };
        Ok(self.push(out, Op::Softmax(x), self.needs(&[x])))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax(&self, x: Var) -> OpResult {
        let out = {
            let xv = self.value(x);
            if !xv.all_finite() {
                return Err(AutodiffError::NonFinite { op: "log_softmax" });
            }
            let mut out = xv.clone();
            for r in 0..xv.rows() {
                let row = out.row_slice_mut(r);
                let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
                let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            out
        };
        Ok(self.push(out, Op::LogSoftmax(x), self.needs(&[x])))
    }

    pub fn transpose(&self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x), self.needs(&[x]))
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&self, x: Var, rows: usize, cols: usize) -> OpResult {
        let out = {
            let xv = self.value(x);
            if rows * cols != xv.len() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "reshape",
                    lhs: xv.shape(),
                    rhs: [rows, cols],
                });
            }
            Tensor::new(rows, cols, xv.data().to_vec())?
        };
        Ok(self.push(out, Op::Reshape(x), self.needs(&[x])))
    }

    /// Stacks `times` copies of `x` vertically.
    pub fn tile_rows(&self, x: Var, times: usize) -> Var {
        let out = {
            let xv = self.value(x);
            let mut data = Vec::with_capacity(xv.len() * times);
            for _ in 0..times {
                data.extend_from_slice(xv.data());
            }
            Tensor::new(xv.rows() * times, xv.cols(), data).expect("tile shape")
        };
        self.push(out, Op::TileRows(x, times), self.needs(&[x]))
    }

    /// Sums `blocks` equal vertical blocks of `x`; adjoint of [`Self::tile_rows`].
    pub fn sum_blocks(&self, x: Var, blocks: usize) -> OpResult {
        let out = {
            let xv = self.value(x);
            if blocks == 0 || !xv.rows().is_multiple_of(blocks) {
                return Err(AutodiffError::Contract(format!(
                    "{} rows do not split into {blocks} blocks",
                    xv.rows()
                )));
            }
            let n = xv.rows() / blocks * xv.cols();
            let mut data = vec![S::zero(); n];
            for b in 0..blocks {
                for (o, &v) in data.iter_mut().zip(&xv.data()[b * n..(b + 1) * n]) {
                    *o += v;
                }
            }
            Tensor::new(xv.rows() / blocks, xv.cols(), data)?
        };
        Ok(self.push(out, Op::SumBlocks(x, blocks), self.needs(&[x])))
    }

    /// Causal im2col for 1-D convolution over a time-major batch: row
    /// `t·batch + b` is position `t` of sequence `b`. Output row `(t, b)`
    /// holds, for `j in 0..kernel`, input row `(t - (kernel - 1 - j), b)`,
    /// or zeros before the sequence start. Multiplying by a
    /// `(kernel·C) × C'` weight gives a convolution whose output at `t`
    /// never sees inputs after `t`.
    pub fn causal_unfold(&self, x: Var, batch: usize, kernel: usize) -> OpResult {
        let out = {
            let xv = self.value(x);
            if batch == 0 || kernel == 0 || !xv.rows().is_multiple_of(batch) {
                return Err(AutodiffError::Contract(format!(
                    "cannot unfold {:?} with batch {batch}, kernel {kernel}",
                    xv.shape()
                )));
            }
            let c = xv.cols();
            let mut out = Tensor::zeros(xv.rows(), kernel * c);
            for r in 0..xv.rows() {
                let t = r / batch;
                for j in 0..kernel {
                    let back = kernel - 1 - j;
                    if t >= back {
                        out.row_slice_mut(r)[j * c..(j + 1) * c].copy_from_slice(xv.row_slice(r - back * batch));
                    }
                }
            }
            out
        };
        Ok(self.push(out, Op::CausalUnfold { x, batch, kernel }, self.needs(&[x])))
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// Forward value is `e`; backward sends the full upstream gradient to `h`
    /// and nothing to `e`, i.e. `h + stop_gradient(e - h)`.
    pub fn straight_through(&self, h: Var, e: Var) -> OpResult {
        let out = {
            let (hs, es) = (self.shape(h), self.shape(e));
            if hs != es {
                return Err(AutodiffError::ShapeMismatch {
                    op: "straight_through",
                    lhs: hs,
                    rhs: es,
                });
            }
            self.value(e).clone()
        };
        Ok(self.push(out, Op::StraightThrough(h), self.needs(&[h])))
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a `1 × 1` loss. Each node is visited once, in
    /// reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<(), AutodiffError> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.0].value.shape() != [1, 1] {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        accumulate(&mut nodes, loss, vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = nodes[i].grad.take() else { continue };
            let contributions = backprop_node(&nodes, i, &g);
            nodes[i].grad = Some(g);
            for (v, c) in contributions {
                accumulate(&mut nodes, v, c);
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(nodes: &mut [Node<S>], v: Var, contribution: Vec<S>) {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return;
    }
    match &mut n.grad {
        Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, &b)| *a += b),
        None => n.grad = Some(contribution),
    }
}

fn reduce_bcast<S: Scalar>(g: Vec<S>, bc: Bcast, cols: usize) -> Vec<S> {
    match bc {
        Bcast::Same => g,
        Bcast::Row => {
            let mut out = vec![S::zero(); cols];
            for (i, &v) in g.iter().enumerate() {
                out[i % cols] += v;
            }
            out
        }
        Bcast::Scalar => vec![g.iter().copied().sum()],
    }
}

fn bcast_at<S: Scalar>(b: &[S], bc: Bcast, i: usize, cols: usize) -> S {
    match bc {
        Bcast::Same => b[i],
        Bcast::Row => b[i % cols],
        Bcast::Scalar => b[0],
    }
}

/// Gradient contributions of node `i` to its inputs.
fn backprop_node<S: Scalar>(nodes: &[Node<S>], i: usize, g: &[S]) -> Vec<(Var, Vec<S>)> {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].requires_grad;
    let y = &node.value;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (n, k, m) = (av.rows(), av.cols(), bv.cols());
            if wants(*a) {
                let mut da = vec![S::zero(); n * k];
                matmul_bt_acc(g, bv.data(), &mut da, n, m, k);
                out.push((*a, da));
            }
            if wants(*b) {
                let mut db = vec![S::zero(); k * m];
                matmul_at_acc(av.data(), g, &mut db, n, k, m);
                out.push((*b, db));
            }
        }
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -S::one() } else { S::one() };
            if wants(*a) {
                out.push((*a, g.to_vec()));
            }
            if wants(*b) {
                let gb = g.iter().map(|&x| x * sign).collect();
                out.push((*b, reduce_bcast(gb, *bc, y.cols())));
            }
        }
        Op::Mul(a, b, bc) => {
            let (av, bv) = (val(*a), val(*b));
            let cols = y.cols();
            if wants(*a) {
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(j, &x)| x * bcast_at(bv.data(), *bc, j, cols))
                    .collect();
                out.push((*a, ga));
            }
            if wants(*b) {
                let gb = g.iter().zip(av.data()).map(|(&x, &a)| x * a).collect();
                out.push((*b, reduce_bcast(gb, *bc, cols)));
            }
        }
        Op::ScaleRows(x, c) => {
            let (xv, cv) = (val(*x), val(*c));
            let cols = xv.cols();
            if wants(*x) {
                let gx = g
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| v * cv.data()[j / cols])
                    .collect();
                out.push((*x, gx));
            }
            if wants(*c) {
                let mut gc = vec![S::zero(); xv.rows()];
                for (j, (&gv, &xvv)) in g.iter().zip(xv.data()).enumerate() {
                    gc[j / cols] += gv * xvv;
                }
                out.push((*c, gc));
            }
        }
        Op::Scale(x, s) => out.push((*x, g.iter().map(|&v| v * *s).collect())),
        Op::AddConst(x) => out.push((*x, g.to_vec())),
        Op::Tanh(x) => out.push((*x, g.iter().zip(y.data()).map(|(&gv, &t)| gv * (S::one() - t * t)).collect())),
        Op::Sigmoid(x) => out.push((*x, g.iter().zip(y.data()).map(|(&gv, &s)| gv * s * (S::one() - s)).collect())),
        Op::Exp(x) => out.push((*x, g.iter().zip(y.data()).map(|(&gv, &e)| gv * e).collect())),
        Op::Log(x) => out.push((*x, g.iter().zip(val(*x).data()).map(|(&gv, &xv)| gv / xv).collect())),
        Op::Softplus(x) => out.push((
            *x,
            g.iter()
                .zip(val(*x).data())
                .map(|(&gv, &xv)| gv * scalar::sigmoid(xv))
                .collect(),
        )),
        Op::Square(x) => out.push((*x, g.iter().zip(val(*x).data()).map(|(&gv, &xv)| gv * (xv + xv)).collect())),
        Op::SumAll(x) => out.push((*x, vec![g[0]; val(*x).len()])),
        Op::WeightedSum(x, w) => {
            let cols = val(*x).cols();
            let gx = (0..val(*x).len()).map(|j| g[0] * w[j / cols]).collect();
            out.push((*x, gx));
        }
        Op::ConcatCols(parts) => {
            let cols = y.cols();
            let mut offset = 0;
            for p in parts {
                let pc = val(*p).cols();
                if wants(*p) {
                    let mut gp = Vec::with_capacity(y.rows() * pc);
                    for r in 0..y.rows() {
                        gp.extend_from_slice(&g[r * cols + offset..r * cols + offset + pc]);
                    }
                    out.push((*p, gp));
                }
                offset += pc;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(*p).len();
                if wants(*p) {
                    out.push((*p, g[offset..offset + n].to_vec()));
                }
                offset += n;
            }
        }
        Op::SliceCols(x, start) => {
            let xv = val(*x);
            let (xc, yc) = (xv.cols(), y.cols());
            let mut gx = vec![S::zero(); xv.len()];
            for r in 0..y.rows() {
                gx[r * xc + start..r * xc + start + yc].copy_from_slice(&g[r * yc..(r + 1) * yc]);
            }
            out.push((*x, gx));
        }
        Op::SliceRows(x, start) => {
            let xv = val(*x);
            let c = xv.cols();
            let mut gx = vec![S::zero(); xv.len()];
            gx[start * c..start * c + g.len()].copy_from_slice(g);
            out.push((*x, gx));
        }
        Op::GatherRows(t, idx) => {
            let tv = val(*t);
            let c = tv.cols();
            let mut gt = vec![S::zero(); tv.len()];
            for (r, &ti) in idx.iter().enumerate() {
                for (o, &v) in gt[ti * c..(ti + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                    *o += v;
                }
            }
            out.push((*t, gt));
        }
        Op::GatherCols(x, idx) => {
            let xv = val(*x);
            let c = xv.cols();
            let mut gx = vec![S::zero(); xv.len()];
            for (r, &ci) in idx.iter().enumerate() {
                gx[r * c + ci] += g[r];
            }
            out.push((*x, gx));
        }
        Op::Softmax(x) => {
            let c = y.cols();
            let mut gx = vec![S::zero(); y.len()];
            for r in 0..y.rows() {
                let yr = y.row_slice(r);
                let gr = &g[r * c..(r + 1) * c];
                let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    gx[r * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            out.push((*x, gx));
        }
        Op::LogSoftmax(x) => {
            let c = y.cols();
            let mut gx = vec![S::zero(); y.len()];
            for r in 0..y.rows() {
                let yr = y.row_slice(r);
                let gr = &g[r * c..(r + 1) * c];
                let total: S = gr.iter().copied().sum();
                for j in 0..c {
                    gx[r * c + j] = gr[j] - yr[j].exp() * total;
                }
            }
            out.push((*x, gx));
        }
        Op::Transpose(x) => {
            let gt = Tensor::new(y.rows(), y.cols(), g.to_vec()).expect("grad shape").transpose();
            out.push((*x, gt.into_data()));
        }
        Op::Reshape(x) => out.push((*x, g.to_vec())),
        Op::TileRows(x, times) => {
            let n = val(*x).len();
            let mut gx = vec![S::zero(); n];
            for b in 0..*times {
                for (o, &v) in gx.iter_mut().zip(&g[b * n..(b + 1) * n]) {
                    *o += v;
                }
            }
            out.push((*x, gx));
        }
        Op::SumBlocks(x, blocks) => {
            let mut gx = Vec::with_capacity(g.len() * blocks);
            for _ in 0..*blocks {
                gx.extend_from_slice(g);
            }
            out.push((*x, gx));
        }
        Op::CausalUnfold { x, batch, kernel } => {
            let xv = val(*x);
            let c = xv.cols();
            let yc = y.cols();
            let mut gx = vec![S::zero(); xv.len()];
            for r in 0..xv.rows() {
                let t = r / batch;
                for j in 0..*kernel {
                    let back = kernel - 1 - j;
                    if t >= back {
                        let src = &g[r * yc + j * c..r * yc + (j + 1) * c];
                        let dst = r - back * batch;
                        for (o, &v) in gx[dst * c..(dst + 1) * c].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
            out.push((*x, gx));
        }
        Op::Div(a, b, bc) => {
            let (av, bv) = (val(*a), val(*b));
            let cols = y.cols();
            if wants(*a) {
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(j, &x)| x / bcast_at(bv.data(), *bc, j, cols))
                    .collect();
                out.push((*a, ga));
            }
            if wants(*b) {
                let gb = g
                    .iter()
                    .enumerate()
                    .map(|(j, &x)| {
                        let d = bcast_at(bv.data(), *bc, j, cols);
                        -x * av.data()[j] / (d * d)
                    })
                    .collect();
                out.push((*b, reduce_bcast(gb, *bc, cols)));
            }
        }
        Op::StraightThrough(h) => out.push((*h, g.to_vec())),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(rows, cols, v).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let g = Graph::new();
        let x = g.constant(t(1, 3, &[0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let g = Graph::new();
        let x = g.constant(t(1, 2, &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(x), Err(AutodiffError::NonFinite { .. })));
    }

    #[test]
    fn masked_positions_get_zero_weight_and_full_mask_is_error() {
        let g = Graph::new();
        let x = g.constant(t(1, 3, &[5.0, 1.0, 2.0]));
        let y = g.masked_softmax(x, Some(&[false, true, true])).unwrap();
        let v = g.value(y).clone();
        assert_eq!(v.data()[0], 0.0);
        assert!((v.data()[1] + v.data()[2] - 1.0).abs() < 1e-15);
        assert!(g.masked_softmax(x, Some(&[false, false, false])).is_err());
    }

    #[test]
    fn stop_gradient_severs_one_branch() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, g.stop_gradient(x)).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 3.0);

        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.stop_gradient(x);
        let y = g.sum(y);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 0.0);
    }

    #[test]
    fn straight_through_forward_is_e_and_grad_goes_to_h() {
        let g = Graph::<f64>::new();
        let h = g.leaf(t(1, 2, &[1.0, 2.0]));
        let e = g.leaf(t(1, 2, &[0.0, 0.0]));
        let q = g.straight_through(h, e).unwrap();
        assert_eq!(g.value(q).data(), &[0.0, 0.0]);
        let w = g.constant(t(1, 2, &[3.0, -4.0]));
        let loss = g.mul(q, w).unwrap();
        let loss = g.sum(loss);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(h).unwrap().data(), &[3.0, -4.0]);
        assert_eq!(g.grad(e).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn straight_through_rejects_shape_mismatch() {
        let g = Graph::<f64>::new();
        let h = g.leaf(t(1, 2, &[1.0, 2.0]));
        let e = g.leaf(t(1, 3, &[0.0, 0.0, 0.0]));
        assert!(matches!(g.straight_through(h, e), Err(AutodiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn fan_out_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // 2x^2
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 8.0);
    }

    #[test]
    fn broadcasting_is_restricted() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let row = g.constant(Tensor::zeros(1, 3));
        let s = g.constant(Tensor::zeros(1, 1));
        let col = g.constant(Tensor::zeros(2, 1));
        assert!(g.add(a, row).is_ok());
        assert!(g.add(a, s).is_ok());
        assert!(matches!(g.add(a, col), Err(AutodiffError::ShapeMismatch { .. })));
        assert!(matches!(g.add(row, a), Err(AutodiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn causal_unfold_zero_pads_each_sequence() {
        let g = Graph::<f64>::new();
        // time-major: rows (t0,b0), (t0,b1), (t1,b0), (t1,b1)
        let x = g.constant(t(4, 1, &[1.0, 3.0, 2.0, 4.0]));
        let u = g.causal_unfold(x, 2, 2).unwrap();
        assert_eq!(g.value(u).data(), &[0.0, 1.0, 0.0, 3.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unreachable_leaf_has_zero_grad() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(1.0));
        let unused = g.leaf(t(1, 2, &[1.0, 1.0]));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0]);
        assert!(g.grad(g.constant(Tensor::scalar(1.0))).is_none());
    }
}
