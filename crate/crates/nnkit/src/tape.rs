//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients
//! for every node that (transitively) depends on a parameter leaf. Shapes
//! are checked eagerly; a mismatch is a programming error and panics.

use crate::params::ParamVector;
use crate::real::Real;

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self::new(rows, cols, vec![v; rows * cols])
    }

    pub fn scalar(v: T) -> Self {
        Self::new(1, 1, vec![v])
    }

    /// Builds a `rows x cols` tensor from `f32` values.
    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        Self::new(rows, cols, data.iter().map(|&v| T::of(v as f64)).collect())
    }

    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend(r.iter().map(|&v| T::of(v as f64)));
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    /// `x [B x in] * w^T` with `w [out x in]`.
    MatMulT(usize, usize),
    /// `x [B x c] + b [1 x c]` broadcast over rows.
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Min(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Abs(usize),
    Softplus(usize),
    Clamp(usize, f64, f64),
    /// Row sums, `[B x c] -> [B x 1]`.
    SumCols(usize),
    /// Column means, `[B x c] -> [1 x c]`.
    MeanRows(usize),
    /// Mean of every element, `-> [1 x 1]`.
    Mean(usize),
    Concat(usize, usize),
    Slice(usize, usize),
    LogSoftmax(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMulT(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Min(..) => "min",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Softplus(_) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::SumCols(_) => "sum_cols",
            Op::MeanRows(_) => "mean_rows",
            Op::Mean(_) => "mean",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::LogSoftmax(_) => "log_softmax",
        }
    }
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Parameter leaves created from a [`ParamVector`], one per layout entry.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
    sizes: Vec<usize>,
}

impl ParamVars {
    pub fn get(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a node, `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Flattens the gradients of `vars` in layout order as `f32`.
    pub fn collect(&self, vars: &ParamVars) -> Vec<f32> {
        let mut out = Vec::with_capacity(vars.sizes.iter().sum());
        for (v, &n) in vars.vars.iter().zip(&vars.sizes) {
            match self.get(*v) {
                Some(g) => out.extend(g.iter().map(|x| x.f64() as f32)),
                None => out.extend(std::iter::repeat_n(0.0f32, n)),
            }
        }
        out
    }

    /// Like [`Gradients::collect`] but keeps full precision.
    pub fn collect_f64(&self, vars: &ParamVars) -> Vec<f64> {
        let mut out = Vec::with_capacity(vars.sizes.iter().sum());
        for (v, &n) in vars.vars.iter().zip(&vars.sizes) {
            match self.get(*v) {
                Some(g) => out.extend(g.iter().map(|x| x.f64())),
                None => out.extend(std::iter::repeat_n(0.0f64, n)),
            }
        }
        out
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node as `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "scalar() on non-scalar node");
        t.data[0].f64()
    }

    /// A leaf that gradients do not flow into.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Copies the value of `v` into a new constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// One leaf per layout entry of `params`.
    pub fn params(&mut self, params: &ParamVector) -> ParamVars {
        self.param_leaves(params, true)
    }

    /// Like [`Tape::params`] but the leaves are constants.
    pub fn frozen_params(&mut self, params: &ParamVector) -> ParamVars {
        self.param_leaves(params, false)
    }

    fn param_leaves(&mut self, params: &ParamVector, requires_grad: bool) -> ParamVars {
        let mut vars = Vec::with_capacity(params.layout().len());
        let mut sizes = Vec::with_capacity(params.layout().len());
        for (i, layout) in params.layout().iter().enumerate() {
            let (r, c) = layout.matrix_dims();
            let t = Tensor::from_f32(r, c, params.tensor(i));
            vars.push(self.push(Op::Leaf, t, requires_grad));
            sizes.push(layout.numel());
        }
        ParamVars { vars, sizes }
    }

    /// First node (in evaluation order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| n.value.data.iter().any(|v| !v.is_finite()))
            .map(|i| (i, self.nodes[i].op.name()))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| f(x)).collect();
        let out = Tensor::new(t.rows, t.cols, data);
        let rg = self.rg(a.0);
        self.push(op, out, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{} operand shapes", op.name());
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.rows, ta.cols, data);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(op, out, rg)
    }

    /// `x * w^T`: `x [B x in]`, `w [out x in]` -> `[B x out]`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tx.cols, tw.cols, "matmul inner dimension");
        let (b, inp, out) = (tx.rows, tx.cols, tw.rows);
        // Transposed copy of w so the inner loop runs over contiguous memory.
        let mut wt = vec![0.0f64; inp * out];
        for o in 0..out {
            for i in 0..inp {
                wt[i * out + o] = tw.data[o * inp + i].f64();
            }
        }
        let mut data = Vec::with_capacity(b * out);
        let mut acc = vec![0.0f64; out];
        for r in 0..b {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for i in 0..inp {
                let xi = tx.data[r * inp + i].f64();
                if xi == 0.0 {
                    continue;
                }
                let wrow = &wt[i * out..(i + 1) * out];
                for (a, &w) in acc.iter_mut().zip(wrow) {
                    *a += xi * w;
                }
            }
            data.extend(acc.iter().map(|&a| T::of(a)));
        }
        let rg = self.rg(x.0) || self.rg(w.0);
        self.push(Op::MatMulT(x.0, w.0), Tensor::new(b, out, data), rg)
    }

    /// `x [B x c] + bias [1 x c]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(bias));
        assert_eq!(tb.rows, 1, "bias must be a single row");
        assert_eq!(tx.cols, tb.cols, "bias width");
        let mut data = tx.data.clone();
        for row in data.chunks_mut(tx.cols) {
            for (v, &b) in row.iter_mut().zip(&tb.data) {
                *v = *v + b;
            }
        }
        let out = Tensor::new(tx.rows, tx.cols, data);
        let rg = self.rg(x.0) || self.rg(bias.0);
        self.push(Op::AddRow(x.0, bias.0), out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    /// Element-wise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Min(a.0, b.0), |x, y| if y < x { y } else { x })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cc = T::of(c);
        self.unary(a, Op::Scale(a.0, c), |x| x * cc)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cc = T::of(c);
        self.unary(a, Op::AddScalar(a.0), |x| x + cc)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a.0), |x| x.ln())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.0), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a.0), |x| x.abs())
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a.0), |x| {
            let xf = x.f64();
            T::of(xf.max(0.0) + (-xf.abs()).exp().ln_1p())
        })
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary(a, Op::Clamp(a.0, lo, hi), |x| x.max(l).min(h))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t
            .data
            .chunks(t.cols)
            .map(|row| T::of(row.iter().map(|v| v.f64()).sum()))
            .collect();
        let out = Tensor::new(t.rows, 1, data);
        let rg = self.rg(a.0);
        self.push(Op::SumCols(a.0), out, rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut acc = vec![0.0f64; t.cols];
        for row in t.data.chunks(t.cols) {
            for (s, v) in acc.iter_mut().zip(row) {
                *s += v.f64();
            }
        }
        let n = t.rows as f64;
        let out = Tensor::new(1, t.cols, acc.into_iter().map(|s| T::of(s / n)).collect());
        let rg = self.rg(a.0);
        self.push(Op::MeanRows(a.0), out, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data.iter().map(|v| v.f64()).sum();
        let out = Tensor::scalar(T::of(s / t.data.len() as f64));
        let rg = self.rg(a.0);
        self.push(Op::Mean(a.0), out, rg)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rows, tb.rows, "concat rows");
        let cols = ta.cols + tb.cols;
        let mut data = Vec::with_capacity(ta.rows * cols);
        for r in 0..ta.rows {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor::new(ta.rows, cols, data);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(Op::Concat(a.0, b.0), out, rg)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols, "slice out of range");
        let mut data = Vec::with_capacity(t.rows * len);
        for r in 0..t.rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::new(t.rows, len, data);
        let rg = self.rg(a.0);
        self.push(Op::Slice(a.0, start), out, rg)
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.data.len());
        for row in t.data.chunks(t.cols) {
            let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v.f64() - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| T::of(v.f64() - lse)));
        }
        let out = Tensor::new(t.rows, t.cols, data);
        let rg = self.rg(a.0);
        self.push(Op::LogSoftmax(a.0), out, rg)
    }

    /// Gradients of `loss` (a `1 x 1` node) with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], idx: usize, contrib: Vec<T>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |idx: usize| &self.nodes[idx].value;
        match node.op {
            Op::Leaf => {}
            Op::MatMulT(x, w) => {
                let (tx, tw) = (val(x), val(w));
                let (b, inp, outd) = (tx.rows, tx.cols, tw.rows);
                if self.rg(x) {
                    let mut dx = Vec::with_capacity(b * inp);
                    let mut acc = vec![0.0f64; inp];
                    for r in 0..b {
                        acc.iter_mut().for_each(|a| *a = 0.0);
                        for o in 0..outd {
                            let go = g[r * outd + o].f64();
                            if go == 0.0 {
                                continue;
                            }
                            let wrow = &tw.data[o * inp..(o + 1) * inp];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += go * wv.f64();
                            }
                        }
                        dx.extend(acc.iter().map(|&a| T::of(a)));
                    }
                    self.accumulate(grads, x, dx);
                }
                if self.rg(w) {
                    let mut dw = vec![0.0f64; outd * inp];
                    for r in 0..b {
                        let xrow = &tx.data[r * inp..(r + 1) * inp];
                        for o in 0..outd {
                            let go = g[r * outd + o].f64();
                            if go == 0.0 {
                                continue;
                            }
                            let drow = &mut dw[o * inp..(o + 1) * inp];
                            for (d, &xv) in drow.iter_mut().zip(xrow) {
                                *d += go * xv.f64();
                            }
                        }
                    }
                    self.accumulate(grads, w, dw.into_iter().map(T::of).collect());
                }
            }
            Op::AddRow(x, b) => {
                if self.rg(x) {
                    self.accumulate(grads, x, g.to_vec());
                }
                if self.rg(b) {
                    let cols = out.cols;
                    let mut db = vec![0.0f64; cols];
                    for row in g.chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v.f64();
                        }
                    }
                    self.accumulate(grads, b, db.into_iter().map(T::of).collect());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                if self.rg(a) {
                    let d = g.iter().zip(&tb.data).map(|(&gv, &y)| gv * y).collect();
                    self.accumulate(grads, a, d);
                }
                if self.rg(b) {
                    let d = g.iter().zip(&ta.data).map(|(&gv, &x)| gv * x).collect();
                    self.accumulate(grads, b, d);
                }
            }
            Op::Min(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let picks_b: Vec<bool> = ta.data.iter().zip(&tb.data).map(|(x, y)| y < x).collect();
                if self.rg(a) {
                    let d = g
                        .iter()
                        .zip(&picks_b)
                        .map(|(&gv, &pb)| if pb { T::zero() } else { gv })
                        .collect();
                    self.accumulate(grads, a, d);
                }
                if self.rg(b) {
                    let d = g
                        .iter()
                        .zip(&picks_b)
                        .map(|(&gv, &pb)| if pb { gv } else { T::zero() })
                        .collect();
                    self.accumulate(grads, b, d);
                }
            }
            Op::Scale(a, c) => {
                let cc = T::of(c);
                self.accumulate(grads, a, g.iter().map(|&v| v * cc).collect());
            }
            Op::AddScalar(a) => self.accumulate(grads, a, g.to_vec()),
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(&val(a).data)
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, a, d);
            }
            Op::Tanh(a) => {
                let d = g
                    .iter()
                    .zip(&out.data)
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect();
                self.accumulate(grads, a, d);
            }
            Op::Exp(a) => {
                let d = g.iter().zip(&out.data).map(|(&gv, &y)| gv * y).collect();
                self.accumulate(grads, a, d);
            }
            Op::Log(a) => {
                let d = g.iter().zip(&val(a).data).map(|(&gv, &x)| gv / x).collect();
                self.accumulate(grads, a, d);
            }
            Op::Square(a) => {
                let two = T::of(2.0);
                let d = g.iter().zip(&val(a).data).map(|(&gv, &x)| gv * two * x).collect();
                self.accumulate(grads, a, d);
            }
            Op::Abs(a) => {
                let d = g
                    .iter()
                    .zip(&val(a).data)
                    .map(|(&gv, &x)| {
                        if x > T::zero() {
                            gv
                        } else if x < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, a, d);
            }
            Op::Softplus(a) => {
                let d = g
                    .iter()
                    .zip(&val(a).data)
                    .map(|(&gv, &x)| {
                        let s = 1.0 / (1.0 + (-x.f64()).exp());
                        gv * T::of(s)
                    })
                    .collect();
                self.accumulate(grads, a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = g
                    .iter()
                    .zip(&val(a).data)
                    .map(|(&gv, &x)| {
                        let xf = x.f64();
                        if xf < lo || xf > hi {
                            T::zero()
                        } else {
                            gv
                        }
                    })
                    .collect();
                self.accumulate(grads, a, d);
            }
            Op::SumCols(a) => {
                let ta = val(a);
                let mut d = Vec::with_capacity(ta.data.len());
                for &gv in g.iter().take(ta.rows) {
                    d.extend(std::iter::repeat_n(gv, ta.cols));
                }
                self.accumulate(grads, a, d);
            }
            Op::MeanRows(a) => {
                let ta = val(a);
                let inv = T::of(1.0 / ta.rows as f64);
                let mut d = Vec::with_capacity(ta.data.len());
                for _ in 0..ta.rows {
                    d.extend(g.iter().map(|&gv| gv * inv));
                }
                self.accumulate(grads, a, d);
            }
            Op::Mean(a) => {
                let n = val(a).data.len();
                let gv = g[0] * T::of(1.0 / n as f64);
                self.accumulate(grads, a, vec![gv; n]);
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (val(a).cols, val(b).cols);
                let rows = out.rows;
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for row in g.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, a, da);
                self.accumulate(grads, b, db);
            }
            Op::Slice(a, start) => {
                let ta = val(a);
                let len = out.cols;
                let mut d = vec![T::zero(); ta.data.len()];
                for r in 0..ta.rows {
                    d[r * ta.cols + start..r * ta.cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, a, d);
            }
            Op::LogSoftmax(a) => {
                // d x_j = g_j - softmax_j * sum_k g_k
                let cols = out.cols;
                let mut d = Vec::with_capacity(out.data.len());
                for (grow, yrow) in g.chunks(cols).zip(out.data.chunks(cols)) {
                    let gs: f64 = grow.iter().map(|v| v.f64()).sum();
                    d.extend(
                        grow.iter()
                            .zip(yrow)
                            .map(|(&gv, &y)| T::of(gv.f64() - y.f64().exp() * gs)),
                    );
                }
                self.accumulate(grads, a, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape<f64>, Var) -> Var, x0: Tensor<f64>) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).unwrap().to_vec();
        let h = 1e-6;
        for i in 0..x0.data.len() {
            let eval = |delta: f64| {
                let mut t = x0.clone();
                t.data[i] += delta;
                let mut tape = Tape::new();
                let x = tape.leaf(t);
                let l = build(&mut tape, x);
                tape.scalar(l)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / (1e-8 + fd.abs().max(analytic[i].abs()));
            assert!(err < 1e-5, "coord {i}: fd {fd} vs analytic {}", analytic[i]);
        }
    }

    fn sample() -> Tensor<f64> {
        Tensor::new(2, 3, vec![0.3, -0.7, 1.2, -0.4, 0.9, 0.15])
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        fd_check(|t, x| { let y = t.tanh(x); t.mean(y) }, sample());
        fd_check(|t, x| { let y = t.exp(x); let y = t.square(y); t.mean(y) }, sample());
        fd_check(|t, x| { let y = t.softplus(x); let y = t.sum_cols(y); t.mean(y) }, sample());
        fd_check(|t, x| { let y = t.abs(x); t.mean(y) }, sample());
        fd_check(|t, x| { let y = t.relu(x); let y = t.scale(y, 3.0); t.mean(y) }, sample());
        fd_check(
            |t, x| {
                let y = t.exp(x);
                let y = t.add_scalar(y, 1.0);
                let y = t.log(y);
                t.mean(y)
            },
            sample(),
        );
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        fd_check(
            |t, x| {
                let a = t.slice_cols(x, 0, 2);
                let b = t.slice_cols(x, 1, 2);
                let m = t.min(a, b);
                let c = t.concat(m, x);
                let c = t.square(c);
                let r = t.mean_rows(c);
                let r = t.square(r);
                t.mean(r)
            },
            sample(),
        );
        fd_check(
            |t, x| {
                let l = t.log_softmax(x);
                let w = t.constant(Tensor::new(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.5]));
                let p = t.mul(l, w);
                t.mean(p)
            },
            sample(),
        );
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let w = Tensor::new(2, 3, vec![0.5, -0.2, 0.1, 0.3, 0.8, -0.6]);
        let w2 = w.clone();
        fd_check(
            move |t, x| {
                let wv = t.constant(w2.clone());
                let y = t.matmul_t(x, wv);
                let y = t.tanh(y);
                t.mean(y)
            },
            sample(),
        );
        let x = sample();
        fd_check(
            move |t, wv| {
                let xv = t.constant(x.clone());
                let b = t.constant(Tensor::new(1, 2, vec![0.1, -0.1]));
                let y = t.matmul_t(xv, wv);
                let y = t.add_row(y, b);
                let y = t.square(y);
                t.mean(y)
            },
            w,
        );
    }

    #[test]
    fn clamp_blocks_gradient_outside_bounds() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(1, 3, vec![-6.0, 0.0, 3.0]));
        let y = tape.clamp(x, -5.0, 2.0);
        let l = tape.mean(y);
        let g = tape.backward(l);
        let gx = g.get(x).unwrap();
        assert_eq!(gx[0], 0.0);
        assert!((gx[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(gx[2], 0.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::new(1, 2, vec![1.0, 2.0]));
        let x = tape.leaf(Tensor::new(1, 2, vec![3.0, 4.0]));
        let y = tape.mul(c, x);
        let d = tape.detach(y);
        let z = tape.add(y, d);
        let l = tape.mean(z);
        let g = tape.backward(l);
        assert!(g.get(c).is_none());
        assert!(g.get(d).is_none());
        assert_eq!(g.get(x).unwrap(), &[0.5, 1.0]);
    }

    #[test]
    fn non_finite_node_is_located() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(1, 2, vec![-1.0, 1.0]));
        let y = tape.log(x);
        let _ = tape.mean(y);
        assert_eq!(tape.first_non_finite(), Some((1, "log")));
    }
}
