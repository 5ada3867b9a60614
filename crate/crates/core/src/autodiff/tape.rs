//! Wengert-list reverse-mode differentiation over dense matrices.
//!
//! Every primitive appends a node holding its output value and whatever it
//! needs for the backward sweep. Node inputs always precede the node, so a
//! single reverse pass over the list visits each node once in a valid order.

use std::sync::Arc;

use super::params::{Gradients, ParamId, ParamStore};
use super::sparse::LinearOperator;
use super::tensor::{axpy, dot, Float, Tensor};
use crate::error::{Error, Result};
use crate::par;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Gather { src: usize, index: Arc<[usize]> },
    MatMul { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: f64 },
    Tanh { x: usize },
    Exp { x: usize },
    Log { x: usize },
    LogSigmoid { x: usize },
    RowSoftmax { x: usize },
    RowScale { x: usize, w: usize },
    HCat { parts: Vec<usize> },
    Cols { x: usize, start: usize },
    Rows { x: usize, start: usize },
    PickCols { x: usize, cols: Arc<[usize]> },
    Cosine { a: usize, b: usize },
    RowLogSumExp { x: usize, excluded: Option<Arc<[bool]>> },
    Sum { x: usize },
    Mean { x: usize },
    RowSum { x: usize },
    SumSquares { x: usize },
    Aggregate { x: usize, op: LinearOperator },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Denominator floor for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// Records primitives and their outputs for one forward/backward cycle.
///
/// A tape is single-owner; independent tapes may run on separate threads
/// and read the same [`ParamStore`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> Option<T> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[usize], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a trainable parameter. Gradients flow back to `id`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Embedding lookup: row `r` of the output is row `index[r]` of `src`.
    pub fn gather(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let table = self.value(src);
        if let Some(&bad) = index.iter().find(|&&i| i >= table.rows()) {
            return Err(Error::dim("gather", format!("row {bad} of {}", table.rows())));
        }
        let out = table.select_rows(index);
        self.push(
            out,
            Op::Gather {
                src: src.0,
                index: index.into(),
            },
            &[src.0],
            "gather",
        )
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let out = matmul(ta, tb);
        self.push(out, Op::MatMul { a: a.0, b: b.0 }, &[a.0, b.0], "matmul")
    }

    /// Adds a `1×c` row vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(Error::dim("add_bias", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let mut out = tx.clone();
        let b = tb.data();
        par::for_each_row(out.data_mut(), b.len(), |_, row| {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        });
        self.push(out, Op::AddBias { x: x.0, bias: bias.0 }, &[x.0, bias.0], "add_bias")
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        self.push(out, op, &[a.0, b.0], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add { a: a.0, b: b.0 }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub { a: a.0, b: b.0 }, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul { a: a.0, b: b.0 }, |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let out = self.value(x).map(|v| v * f);
        self.push(out, Op::Scale { x: x.0, factor }, &[x.0], "scale")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(T::tanh);
        self.push(out, Op::Tanh { x: x.0 }, &[x.0], "tanh")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(T::exp);
        self.push(out, Op::Exp { x: x.0 }, &[x.0], "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(T::ln);
        self.push(out, Op::Log { x: x.0 }, &[x.0], "log")
    }

    /// `ln σ(x)`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(log_sigmoid);
        self.push(out, Op::LogSigmoid { x: x.0 }, &[x.0], "log_sigmoid")
    }

    /// Softmax along each row, with max-subtraction.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let width = out.cols();
        par::for_each_row(out.data_mut(), width, |_, row| softmax_in_place(row));
        self.push(out, Op::RowSoftmax { x: x.0 }, &[x.0], "row_softmax")
    }

    /// Multiplies row `r` of `x` by the scalar `w[r]` (`w` is `n×1`).
    pub fn row_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.cols() != 1 || tw.rows() != tx.rows() {
            return Err(Error::dim("row_scale", format!("{:?} by {:?}", tx.shape(), tw.shape())));
        }
        let mut out = tx.clone();
        let width = out.cols();
        par::for_each_row(out.data_mut(), width, |r, row| {
            let s = tw.get(r, 0);
            row.iter_mut().for_each(|v| *v = *v * s);
        });
        self.push(out, Op::RowScale { x: x.0, w: w.0 }, &[x.0, w.0], "row_scale")
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hcat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.shape(p)[0])
            .ok_or_else(|| Error::dim("hcat", "no inputs"))?;
        if parts.iter().any(|&p| self.shape(p)[0] != rows) {
            return Err(Error::dim("hcat", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(out, Op::HCat { parts: idx.clone() }, &idx, "hcat")
    }

    /// Columns `start..start + len` of `x`.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.cols() {
            return Err(Error::dim("cols", format!("{start}+{len} of {}", tx.cols())));
        }
        let out = Tensor::from_fn(tx.rows(), len, |r, c| tx.get(r, start + c));
        self.push(out, Op::Cols { x: x.0, start }, &[x.0], "cols")
    }

    /// Rows `start..start + len` of `x`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.rows() {
            return Err(Error::dim("rows", format!("{start}+{len} of {}", tx.rows())));
        }
        let w = tx.cols();
        let out = Tensor::new(len, w, tx.data()[start * w..(start + len) * w].to_vec())?;
        self.push(out, Op::Rows { x: x.0, start }, &[x.0], "rows")
    }

    /// `n×1` column holding `x[r, cols[r]]`.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if cols.len() != tx.rows() || cols.iter().any(|&c| c >= tx.cols()) {
            return Err(Error::dim(
                "pick_cols",
                format!("{} picks from {:?}", cols.len(), tx.shape()),
            ));
        }
        let out = Tensor::column_vector(cols.iter().enumerate().map(|(r, &c)| tx.get(r, c)).collect());
        self.push(
            out,
            Op::PickCols {
                x: x.0,
                cols: cols.into(),
            },
            &[x.0],
            "pick_cols",
        )
    }

    /// Pairwise cosine similarity: `out[i, j] = cos(a_i, b_j)`, the
    /// denominator floored at [`COSINE_EPS`].
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::dim("cosine", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let na = row_norms(ta);
        let nb = row_norms(tb);
        let mut out = matmul(ta, &transpose(tb));
        let eps = T::of(COSINE_EPS);
        par::for_each_row(out.data_mut(), tb.rows(), |i, row| {
            for (o, &nbj) in row.iter_mut().zip(&nb) {
                *o = *o / (na[i] * nbj).max(eps);
            }
        });
        self.push(out, Op::Cosine { a: a.0, b: b.0 }, &[a.0, b.0], "cosine")
    }

    /// `n×1` column of `log Σ_c exp(x[r, c])` over non-excluded entries.
    pub fn row_logsumexp(&mut self, x: Var, excluded: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        if let Some(mask) = excluded {
            if mask.len() != tx.len() {
                return Err(Error::dim("row_logsumexp", "mask size differs from input"));
            }
        }
        let out = Tensor::column_vector(
            (0..tx.rows())
                .map(|r| {
                    let mask = excluded.map(|m| &m[r * tx.cols()..(r + 1) * tx.cols()]);
                    logsumexp(tx.row(r), mask)
                })
                .collect(),
        );
        let excluded = excluded.map(Arc::from);
        self.push(out, Op::RowLogSumExp { x: x.0, excluded }, &[x.0], "row_logsumexp")
    }

    /// Sum of all elements as a `1×1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, &[x.0], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::dim("mean", "empty input"));
        }
        let s = t.data().iter().fold(T::zero(), |a, &v| a + v) / T::of(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean { x: x.0 }, &[x.0], "mean")
    }

    /// `n×1` column of row sums.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::column_vector((0..t.rows()).map(|r| t.row(r).iter().copied().sum()).collect());
        self.push(out, Op::RowSum { x: x.0 }, &[x.0], "row_sum")
    }

    /// Squared L2 norm of all elements.
    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_squares();
        self.push(Tensor::scalar(s), Op::SumSquares { x: x.0 }, &[x.0], "sum_squares")
    }

    /// Sparse-neighbour aggregation `S · x`.
    pub fn aggregate(&mut self, x: Var, op: &LinearOperator) -> Result<Var> {
        let out = op.forward.apply(self.value(x))?;
        self.push(out, Op::Aggregate { x: x.0, op: op.clone() }, &[x.0], "aggregate")
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut out = Gradients::zeros_like(store);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Some(pid) = node.param {
                out.get_mut(pid).add_assign(&g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(out)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = node.value.as_ref();
        match &node.op {
            Op::Leaf => {}
            Op::Gather { src, index } => {
                let s = self.val(*src);
                let mut d = Tensor::zeros(s.rows(), s.cols());
                for (r, &i) in index.iter().enumerate() {
                    axpy(T::one(), g.row(r), d.row_mut(i));
                }
                accumulate(grads, *src, d);
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    accumulate(grads, *a, matmul_transposed_rhs(g, tb));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, matmul_transposed_lhs(ta, g));
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.needs(*bias) {
                    let mut d = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        axpy(T::one(), g.row(r), d.data_mut());
                    }
                    accumulate(grads, *bias, d);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    accumulate(grads, *a, elementwise(g, tb, |gv, bv| gv * bv));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, elementwise(g, ta, |gv, av| gv * av));
                }
            }
            Op::Scale { x, factor } => {
                let f = T::of(*factor);
                accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::Tanh { x } => {
                accumulate(grads, *x, elementwise(g, y, |gv, yv| gv * (T::one() - yv * yv)));
            }
            Op::Exp { x } => {
                accumulate(grads, *x, elementwise(g, y, |gv, yv| gv * yv));
            }
            Op::Log { x } => {
                accumulate(grads, *x, elementwise(g, self.val(*x), |gv, xv| gv / xv));
            }
            Op::LogSigmoid { x } => {
                // d/dx ln σ(x) = σ(−x)
                accumulate(grads, *x, elementwise(g, self.val(*x), |gv, xv| gv * sigmoid(-xv)));
            }
            Op::RowSoftmax { x } => {
                let mut d = g.clone();
                let w = d.cols();
                par::for_each_row(d.data_mut(), w, |r, row| {
                    let yr = y.row(r);
                    let inner = dot(row, yr);
                    for (dv, &yv) in row.iter_mut().zip(yr) {
                        *dv = yv * (*dv - inner);
                    }
                });
                accumulate(grads, *x, d);
            }
            Op::RowScale { x, w } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                if self.needs(*x) {
                    let mut d = g.clone();
                    let width = d.cols();
                    par::for_each_row(d.data_mut(), width, |r, row| {
                        let s = tw.get(r, 0);
                        row.iter_mut().for_each(|v| *v = *v * s);
                    });
                    accumulate(grads, *x, d);
                }
                if self.needs(*w) {
                    let d = Tensor::column_vector((0..g.rows()).map(|r| dot(g.row(r), tx.row(r))).collect());
                    accumulate(grads, *w, d);
                }
            }
            Op::HCat { parts } => {
                let mut at = 0;
                for &p in parts {
                    let width = self.val(p).cols();
                    if self.needs(p) {
                        let d = Tensor::from_fn(g.rows(), width, |r, c| g.get(r, at + c));
                        accumulate(grads, p, d);
                    }
                    at += width;
                }
            }
            Op::Cols { x, start } => {
                let tx = self.val(*x);
                let mut d = Tensor::zeros(tx.rows(), tx.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, d);
            }
            Op::Rows { x, start } => {
                let tx = self.val(*x);
                let mut d = Tensor::zeros(tx.rows(), tx.cols());
                let w = tx.cols();
                d.data_mut()[start * w..(start + g.rows()) * w].copy_from_slice(g.data());
                accumulate(grads, *x, d);
            }
            Op::PickCols { x, cols } => {
                let tx = self.val(*x);
                let mut d = Tensor::zeros(tx.rows(), tx.cols());
                for (r, &c) in cols.iter().enumerate() {
                    d.set(r, c, g.get(r, 0));
                }
                accumulate(grads, *x, d);
            }
            Op::Cosine { a, b } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (da, db) = cosine_backward(ta, tb, y, g, self.needs(*a), self.needs(*b));
                if let Some(da) = da {
                    accumulate(grads, *a, da);
                }
                if let Some(db) = db {
                    accumulate(grads, *b, db);
                }
            }
            Op::RowLogSumExp { x, excluded } => {
                let tx = self.val(*x);
                let cols = tx.cols();
                let mut d = Tensor::zeros(tx.rows(), cols);
                par::for_each_row(d.data_mut(), cols, |r, row| {
                    let lse = y.get(r, 0);
                    let gr = g.get(r, 0);
                    for (c, dv) in row.iter_mut().enumerate() {
                        let skip = excluded.as_ref().is_some_and(|m| m[r * cols + c]);
                        if !skip {
                            *dv = gr * (tx.get(r, c) - lse).exp();
                        }
                    }
                });
                accumulate(grads, *x, d);
            }
            Op::Sum { x } => {
                let tx = self.val(*x);
                let gv = g.data()[0];
                accumulate(grads, *x, Tensor::from_fn(tx.rows(), tx.cols(), |_, _| gv));
            }
            Op::Mean { x } => {
                let tx = self.val(*x);
                let gv = g.data()[0] / T::of(tx.len() as f64);
                accumulate(grads, *x, Tensor::from_fn(tx.rows(), tx.cols(), |_, _| gv));
            }
            Op::RowSum { x } => {
                let tx = self.val(*x);
                accumulate(grads, *x, Tensor::from_fn(tx.rows(), tx.cols(), |r, _| g.get(r, 0)));
            }
            Op::SumSquares { x } => {
                let two_g = T::of(2.0) * g.data()[0];
                accumulate(grads, *x, self.val(*x).map(|v| v * two_g));
            }
            Op::Aggregate { x, op } => {
                let d = op.adjoint.apply(g).expect("adjoint shape follows forward shape");
                accumulate(grads, *x, d);
            }
        }
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sigmoid<T: Float>(x: T) -> T {
    // ln σ(x) = min(x, 0) − ln(1 + e^{−|x|})
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn logsumexp<T: Float>(row: &[T], excluded: Option<&[bool]>) -> T {
    let keep = |c: usize| excluded.is_none_or(|m| !m[c]);
    let max = row
        .iter()
        .enumerate()
        .filter(|&(c, _)| keep(c))
        .fold(T::neg_infinity(), |m, (_, &v)| m.max(v));
    let total = row
        .iter()
        .enumerate()
        .filter(|&(c, _)| keep(c))
        .fold(T::zero(), |s, (_, &v)| s + (v - max).exp());
    max + total.ln()
}

fn row_norms<T: Float>(t: &Tensor<T>) -> Vec<T> {
    (0..t.rows())
        .map(|r| t.row(r).iter().fold(T::zero(), |s, &v| s + v * v).sqrt())
        .collect()
}

/// `a · b`, output rows in parallel.
pub(crate) fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m) = (a.cols(), b.cols());
    let mut out = Tensor::zeros(a.rows(), m);
    par::for_each_row(out.data_mut(), m, |i, row| {
        let ar = a.row(i);
        for (kk, &av) in ar.iter().enumerate().take(k) {
            if av != T::zero() {
                axpy(av, b.row(kk), row);
            }
        }
    });
    out
}

/// `g · bᵀ`.
fn matmul_transposed_rhs<T: Float>(g: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let k = b.rows();
    let mut out = Tensor::zeros(g.rows(), k);
    par::for_each_row(out.data_mut(), k, |i, row| {
        let gr = g.row(i);
        for (kk, o) in row.iter_mut().enumerate() {
            *o = dot(gr, b.row(kk));
        }
    });
    out
}

/// `aᵀ · g`, output rows handed out in blocks; each block walks the rows of
/// `a` in ascending order so the reduction order is fixed.
fn matmul_transposed_lhs<T: Float>(a: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    const BLOCK: usize = 32;
    let (k, m) = (a.cols(), g.cols());
    let mut out = Tensor::zeros(k, m);
    par::for_each_block(out.data_mut(), m, BLOCK, |k0, block| {
        let rows_here = block.len() / m.max(1);
        for i in 0..a.rows() {
            let ar = &a.row(i)[k0..k0 + rows_here];
            let gr = g.row(i);
            for (kk, &av) in ar.iter().enumerate() {
                if av != T::zero() {
                    axpy(av, gr, &mut block[kk * m..(kk + 1) * m]);
                }
            }
        }
    });
    out
}

type OptTensor<T> = Option<Tensor<T>>;

fn cosine_backward<T: Float>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    y: &Tensor<T>,
    g: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (OptTensor<T>, OptTensor<T>) {
    let eps = T::of(COSINE_EPS);
    let na = row_norms(a);
    let nb = row_norms(b);
    let m = b.rows();
    // ∂cos/∂a_i = Σ_j g_ij b_j / den_ij − (Σ_j g_ij cos_ij) a_i / |a_i|², the
    // radial sum running only over pairs above the floor (below it den does
    // not depend on a_i). `w` holds g/den and `r` the radial summands.
    let mut w = g.clone();
    let mut r = Tensor::zeros(a.rows(), m);
    par::for_each_row(w.data_mut(), m, |i, row| {
        for (j, o) in row.iter_mut().enumerate() {
            let prod = na[i] * nb[j];
            *o = *o / prod.max(eps);
        }
    });
    par::for_each_row(r.data_mut(), m, |i, row| {
        for (j, o) in row.iter_mut().enumerate() {
            if na[i] * nb[j] > eps {
                *o = g.get(i, j) * y.get(i, j);
            }
        }
    });
    let shrink = |out: &mut Tensor<T>, rows: &Tensor<T>, norms: &[T], radial: &[T]| {
        let d = rows.cols();
        par::for_each_row(out.data_mut(), d, |k, row| {
            if norms[k] > T::zero() && radial[k] != T::zero() {
                axpy(-radial[k] / (norms[k] * norms[k]), rows.row(k), row);
            }
        });
    };
    let da = need_a.then(|| {
        let mut da = matmul(&w, b);
        let radial: Vec<T> = (0..a.rows())
            .map(|i| r.row(i).iter().fold(T::zero(), |s, &v| s + v))
            .collect();
        shrink(&mut da, a, &na, &radial);
        da
    });
    let db = need_b.then(|| {
        let mut db = matmul_transposed_lhs(&w, a);
        let mut radial = vec![T::zero(); m];
        for i in 0..a.rows() {
            for (s, &v) in radial.iter_mut().zip(r.row(i)) {
                *s = *s + v;
            }
        }
        shrink(&mut db, b, &nb, &radial);
        db
    });
    (da, db)
}

fn transpose<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(t.cols(), t.rows(), |r, c| t.get(c, r))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(store: &mut ParamStore<f64>, rows: usize, cols: usize, data: &[f64]) -> ParamId {
        store.add("x", Tensor::new(rows, cols, data.to_vec()).unwrap())
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(1, 4));
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::row_vector(vec![3.7, 3.7]));
        let y = tape.row_softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cosine_of_vector_with_itself_is_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::row_vector(vec![0.3, -2.0, 5.0]));
        let c = tape.cosine(x, x).unwrap();
        assert!((tape.value(c).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero_not_nan() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(1, 3));
        let c = tape.cosine(x, x).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0]);
    }

    #[test]
    fn cosine_below_the_floor_is_linear_in_the_small_row() {
        // |a|·|b| < eps: cos = a·b / eps, so ∂/∂a = b / eps and ∂/∂b = a / eps
        let mut store = ParamStore::new();
        let a = leaf(&mut store, 1, 2, &[1e-14, 0.0]);
        let b = leaf(&mut store, 2, 2, &[0.5, 0.25, -1.0, 2.0]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&store, a), tape.param(&store, b));
        let c = tape.cosine(va, vb).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s, &store).unwrap();
        let expect_a = [(0.5 - 1.0) / COSINE_EPS, (0.25 + 2.0) / COSINE_EPS];
        for (got, want) in g.get(a).data().iter().zip(expect_a) {
            assert!((got - want).abs() <= 1e-9 * want.abs());
        }
        for (got, want) in g.get(b).data().iter().zip([1e-2, 0.0, 1e-2, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut store = ParamStore::new();
        let id = leaf(&mut store, 1, 5, &[0.1, -0.2, 0.3, 0.4, 0.5]);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s, &store).unwrap();
        assert_eq!(g.get(id).data(), &[1.0; 5]);
    }

    #[test]
    fn gradient_of_half_squared_norm_is_identity() {
        let mut store = ParamStore::new();
        let vals = [0.7, -1.3, 2.0];
        let id = leaf(&mut store, 3, 1, &vals);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let sq = tape.sum_squares(x).unwrap();
        let half = tape.scale(sq, 0.5).unwrap();
        let g = tape.backward(half, &store).unwrap();
        assert_eq!(g.get(id).data(), &vals);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let used = leaf(&mut store, 1, 2, &[1.0, 2.0]);
        let unused = leaf(&mut store, 2, 2, &[1.0; 4]);
        let mut tape = Tape::new();
        let x = tape.param(&store, used);
        let _ = tape.param(&store, unused);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s, &store).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut store = ParamStore::new();
        let id = leaf(&mut store, 1, 2, &[1.0, 2.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        assert!(matches!(tape.backward(x, &store), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
        let c = tape.constant(Tensor::zeros(3, 2));
        assert!(matches!(tape.add(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn non_finite_output_is_a_numeric_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::row_vector(vec![0.0]));
        assert!(matches!(tape.log(x), Err(Error::Numeric { op: "log" })));
        let big = tape.constant(Tensor::row_vector(vec![1e300]));
        assert!(matches!(tape.exp(big), Err(Error::Numeric { .. })));
    }

    #[test]
    fn log_sigmoid_is_stable_at_extremes() {
        assert_eq!(log_sigmoid(800.0f64), 0.0);
        assert!((log_sigmoid(-800.0f64) + 800.0).abs() < 1e-9);
        assert!((log_sigmoid(0.0f64) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn masked_logsumexp_ignores_excluded() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::row_vector(vec![1.0, 50.0, 2.0]));
        let y = tape.row_logsumexp(x, Some(&[false, true, false])).unwrap();
        let expected = (1.0f64.exp() + 2.0f64.exp()).ln();
        assert!((tape.value(y).data()[0] - expected).abs() < 1e-12);
    }
}
