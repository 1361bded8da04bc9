//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! An arena of eagerly evaluated nodes: each builder computes the forward
//! value immediately and records the op, so values can be inspected while the
//! graph is still being built. `backward` runs one reverse sweep accumulating
//! vector-Jacobian products into every node that needs a gradient.
//!
//! Shape mismatches while building a graph are programming errors and panic;
//! the public numeric ops with error contracts live in [`crate::ops`].

use crate::ops::sigmoid;
use crate::{DenseMatrix, Real};

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Mask(Var, DenseMatrix<T>),
    MulCol(Var, Var),
    ScaleByVar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        inv_std: Vec<T>,
        x_hat: DenseMatrix<T>,
    },
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
    },
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: DenseMatrix<T>,
    },
    MseConst {
        x: Var,
        target: DenseMatrix<T>,
    },
    RecipEntropyMean(Var),
    PairwiseDistance {
        x: Var,
        e: Var,
        metric: PairMetric,
    },
}

/// Distance kind for [`Graph::pairwise_distance`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PairMetric {
    /// Σ_j |x_j - e_j|
    L1,
    /// ½ Σ_j (x_j - e_j)²
    HalfSqL2,
}

struct Node<T: Real> {
    op: Op<T>,
    value: DenseMatrix<T>,
    grad: Option<DenseMatrix<T>>,
    needs_grad: bool,
}

/// Recording tape (a DAG of matrix ops) with eager forward evaluation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: DenseMatrix<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf; gradients accumulate here.
    pub fn param(&mut self, value: DenseMatrix<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Non-trainable leaf (data, detached values).
    pub fn constant(&mut self, value: DenseMatrix<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last `backward` call; zeros if the node
    /// was not reached.
    pub fn grad(&self, v: Var) -> DenseMatrix<T> {
        let n = &self.nodes[v.0];
        n.grad
            .clone()
            .unwrap_or_else(|| DenseMatrix::zeros(n.value.rows(), n.value.cols()))
    }

    // ---- forward builders -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), value, ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMulNT(a, b), value, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), value, ng)
    }

    /// Adds a 1×cols row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a).add_row_broadcast(self.value(row));
        let ng = self.needs(a) || self.needs(row);
        self.push(Op::AddRow(a, row), value, ng)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).scale(k);
        let ng = self.needs(a);
        self.push(Op::Scale(a, k), value, ng)
    }

    /// Elementwise product with a constant matrix (dropout masks, top-T
    /// attention masks).
    pub fn mask(&mut self, a: Var, mask: DenseMatrix<T>) -> Var {
        let value = self.value(a).hadamard(&mask);
        let ng = self.needs(a);
        self.push(Op::Mask(a, mask), value, ng)
    }

    /// Scales row `i` of `a` by `w[i]` where `w` is rows×1.
    pub fn mul_col(&mut self, a: Var, w: Var) -> Var {
        let am = self.value(a);
        let wm = self.value(w);
        assert_eq!(wm.cols(), 1, "mul_col weight must be a column");
        assert_eq!(wm.rows(), am.rows(), "mul_col row mismatch");
        let mut value = am.clone();
        for i in 0..value.rows() {
            let k = wm[(i, 0)];
            for x in value.row_mut(i) {
                *x = *x * k;
            }
        }
        let ng = self.needs(a) || self.needs(w);
        self.push(Op::MulCol(a, w), value, ng)
    }

    /// Scales all of `a` by a 1×1 scalar variable.
    pub fn scale_by_var(&mut self, a: Var, s: Var) -> Var {
        let sm = self.value(s);
        assert_eq!(sm.shape(), (1, 1), "scale_by_var needs a 1x1 scalar");
        let k = sm[(0, 0)];
        let value = self.value(a).scale(k);
        let ng = self.needs(a) || self.needs(s);
        self.push(Op::ScaleByVar(a, s), value, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.needs(a);
        self.push(Op::Relu(a), value, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), value, ng)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = crate::ops::softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push(Op::RowSoftmax(a), value, ng)
    }

    /// Row-wise layer norm with learnable 1×cols gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        assert_eq!(self.value(gain).shape(), (1, cols), "layer_norm gain shape");
        assert_eq!(self.value(bias).shape(), (1, cols), "layer_norm bias shape");
        let n = T::cast(cols as f64);
        let mut x_hat = DenseMatrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xm.row(i);
            let mean = r.iter().fold(T::zero(), |a, &b| a + b) / n;
            let var = r.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in r.iter().enumerate() {
                x_hat[(i, j)] = (v - mean) * inv;
            }
        }
        let gm = self.value(gain).clone();
        let bm = self.value(bias).clone();
        let value = DenseMatrix::from_fn(rows, cols, |i, j| {
            gm[(0, j)] * x_hat[(i, j)] + bm[(0, j)]
        });
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                x_hat,
            },
            value,
            ng,
        )
    }

    /// Column means as a 1×cols row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        assert!(am.rows() > 0, "mean_rows of empty matrix");
        let value = am.col_sums().scale(T::one() / T::cast(am.rows() as f64));
        let ng = self.needs(a);
        self.push(Op::MeanRows(a), value, ng)
    }

    /// Row gather: output row `r` is input row `idx[r]`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let am = self.value(a);
        let cols = am.cols();
        let mut value = DenseMatrix::zeros(idx.len(), cols);
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).copy_from_slice(am.row(i));
        }
        let ng = self.needs(a);
        self.push(Op::GatherRows(a, idx), value, ng)
    }

    /// Row scatter-add into a zero matrix with `total_rows` rows:
    /// `out[idx[r]] += a[r]`.
    pub fn scatter_rows(&mut self, a: Var, idx: Vec<usize>, total_rows: usize) -> Var {
        let am = self.value(a);
        assert_eq!(am.rows(), idx.len(), "scatter_rows index length");
        let cols = am.cols();
        let mut value = DenseMatrix::zeros(total_rows, cols);
        for (r, &i) in idx.iter().enumerate() {
            let src = am.row(r);
            let dst = value.row_mut(i);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let ng = self.needs(a);
        self.push(Op::ScatterRows { x: a, idx }, value, ng)
    }

    /// Columns `[start, start + len)` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let am = self.value(a);
        assert!(start + len <= am.cols(), "slice_cols out of range");
        let value = DenseMatrix::from_fn(am.rows(), len, |i, j| am[(i, start + j)]);
        let ng = self.needs(a);
        self.push(Op::SliceCols(a, start), value, ng)
    }

    /// Vertical stack; all parts share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(pm.data());
        }
        let value = DenseMatrix::from_raw(rows, cols, data);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatRows(parts.to_vec()), value, ng)
    }

    /// Horizontal stack; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = DenseMatrix::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.rows(), rows, "concat_cols height mismatch");
            for i in 0..rows {
                for (j, &v) in pm.row(i).iter().enumerate() {
                    value[(i, at + j)] = v;
                }
            }
            at += pm.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols(parts.to_vec()), value, ng)
    }

    /// Mean over rows of `-log softmax(logits)[label]`; returns a 1×1 scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows(), labels.len(), "one label per logit row");
        let probs = crate::ops::softmax_rows(lm);
        let floor = T::cast(1e-300).max(T::min_positive_value());
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < lm.cols(), "label out of range");
            total -= probs[(i, y)].max(floor).ln();
        }
        let mean = total / T::cast(labels.len() as f64);
        let value = DenseMatrix::from_raw(1, 1, vec![mean]);
        let ng = self.needs(logits);
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
            ng,
        )
    }

    /// Mean squared difference against a constant target; 1×1 scalar.
    pub fn mse_const(&mut self, x: Var, target: DenseMatrix<T>) -> Var {
        let xm = self.value(x);
        assert_eq!(xm.shape(), target.shape(), "mse_const shape mismatch");
        let n = T::cast((xm.rows() * xm.cols()) as f64);
        let mut total = T::zero();
        for (&a, &b) in xm.data().iter().zip(target.data()) {
            let d = a - b;
            total += d * d;
        }
        let value = DenseMatrix::from_raw(1, 1, vec![total / n]);
        let ng = self.needs(x);
        self.push(Op::MseConst { x, target }, value, ng)
    }

    /// All-pairs distances between rows of `x` (m×d) and rows of `e` (n×d);
    /// output entry (i, j) = dist(x_i, e_j).
    pub fn pairwise_distance(&mut self, x: Var, e: Var, metric: PairMetric) -> Var {
        let xm = self.value(x);
        let em = self.value(e);
        assert_eq!(xm.cols(), em.cols(), "pairwise_distance width mismatch");
        let value = DenseMatrix::from_fn(xm.rows(), em.rows(), |i, j| {
            let xr = xm.row(i);
            let er = em.row(j);
            match metric {
                PairMetric::L1 => xr
                    .iter()
                    .zip(er)
                    .fold(T::zero(), |acc, (&a, &b)| acc + (a - b).abs()),
                PairMetric::HalfSqL2 => {
                    xr.iter()
                        .zip(er)
                        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
                        / T::cast(2.0)
                }
            }
        });
        let ng = self.needs(x) || self.needs(e);
        self.push(Op::PairwiseDistance { x, e, metric }, value, ng)
    }

    /// Mean over rows of `1 / H(row)` for a row-stochastic input; 1×1 scalar.
    pub fn recip_entropy_mean(&mut self, s: Var) -> Var {
        let sm = self.value(s);
        let rows = sm.rows();
        assert!(rows > 0, "recip_entropy_mean of empty matrix");
        let mut total = T::zero();
        for i in 0..rows {
            total += T::one() / crate::ops::entropy_of_probs(sm.row(i));
        }
        let value = DenseMatrix::from_raw(1, 1, vec![total / T::cast(rows as f64)]);
        let ng = self.needs(s);
        self.push(Op::RecipEntropyMean(s), value, ng)
    }

    // ---- backward ---------------------------------------------------------

    fn accum(&mut self, v: Var, delta: &DenseMatrix<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let (rows, cols) = self.nodes[v.0].value.shape();
        debug_assert_eq!(delta.shape(), (rows, cols), "gradient shape mismatch");
        match &mut self.nodes[v.0].grad {
            Some(g) => g.add_assign(delta),
            slot @ None => *slot = Some(delta.clone()),
        }
    }

    /// Like `accum` but takes ownership, avoiding a copy when the slot is
    /// empty (the common single-consumer case).
    fn accum_owned(&mut self, v: Var, delta: DenseMatrix<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let (rows, cols) = self.nodes[v.0].value.shape();
        debug_assert_eq!(delta.shape(), (rows, cols), "gradient shape mismatch");
        match &mut self.nodes[v.0].grad {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Takes the (zero-initialized if absent) gradient buffer of `v` for
    /// in-place accumulation; sparse VJPs (gathers, slices) use this to
    /// avoid allocating full source-sized deltas.
    fn take_grad_buffer(&mut self, v: Var) -> DenseMatrix<T> {
        let (rows, cols) = self.nodes[v.0].value.shape();
        self.nodes[v.0]
            .grad
            .take()
            .unwrap_or_else(|| DenseMatrix::zeros(rows, cols))
    }

    /// Reverse sweep from a 1×1 scalar node. Gradients from any previous
    /// sweep are cleared first.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward starts from a scalar"
        );
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(DenseMatrix::from_raw(1, 1, vec![T::one()]));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(up) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &up);
            self.nodes[i].grad = Some(up);
        }
    }

    fn propagate(&mut self, i: usize, up: &DenseMatrix<T>) {
        // Values are read before mutating grads; ops only reference parents
        // with smaller indices.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da = up.matmul_nt(self.value(b));
                    self.accum_owned(a, da);
                }
                if self.needs(b) {
                    let db = self.value(a).matmul_tn(up);
                    self.accum_owned(b, db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da = up.matmul(self.value(b));
                    self.accum_owned(a, da);
                }
                if self.needs(b) {
                    let db = up.matmul_tn(self.value(a));
                    self.accum_owned(b, db);
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, up);
                self.accum(b, up);
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                self.accum(a, up);
                if self.needs(row) {
                    let drow = up.col_sums();
                    self.accum_owned(row, drow);
                }
            }
            Op::Scale(a, k) => {
                let (a, k) = (*a, *k);
                let da = up.scale(k);
                self.accum_owned(a, da);
            }
            Op::Mask(a, m) => {
                let a = *a;
                let da = up.hadamard(m);
                self.accum_owned(a, da);
            }
            Op::MulCol(a, w) => {
                let (a, w) = (*a, *w);
                if self.needs(a) {
                    let wm = self.value(w);
                    let mut da = up.clone();
                    for r in 0..da.rows() {
                        let k = wm[(r, 0)];
                        for x in da.row_mut(r) {
                            *x = *x * k;
                        }
                    }
                    self.accum_owned(a, da);
                }
                if self.needs(w) {
                    let am = self.value(a);
                    let mut dw = DenseMatrix::zeros(am.rows(), 1);
                    for r in 0..am.rows() {
                        let mut acc = T::zero();
                        for (x, u) in am.row(r).iter().zip(up.row(r)) {
                            acc += *x * *u;
                        }
                        dw[(r, 0)] = acc;
                    }
                    self.accum_owned(w, dw);
                }
            }
            Op::ScaleByVar(a, s) => {
                let (a, s) = (*a, *s);
                let k = self.value(s)[(0, 0)];
                if self.needs(a) {
                    let da = up.scale(k);
                    self.accum_owned(a, da);
                }
                if self.needs(s) {
                    let am = self.value(a);
                    let mut acc = T::zero();
                    for (x, u) in am.data().iter().zip(up.data()) {
                        acc += *x * *u;
                    }
                    let ds = DenseMatrix::from_raw(1, 1, vec![acc]);
                    self.accum_owned(s, ds);
                }
            }
            Op::Relu(a) => {
                let a = *a;
                let am = self.value(a);
                let da = DenseMatrix::from_fn(up.rows(), up.cols(), |r, c| {
                    if am[(r, c)] > T::zero() {
                        up[(r, c)]
                    } else {
                        T::zero()
                    }
                });
                self.accum_owned(a, da);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let ym = &self.nodes[i].value;
                let da = DenseMatrix::from_fn(up.rows(), up.cols(), |r, c| {
                    let y = ym[(r, c)];
                    up[(r, c)] * y * (T::one() - y)
                });
                self.accum_owned(a, da);
            }
            Op::RowSoftmax(a) => {
                let a = *a;
                let sm = &self.nodes[i].value;
                let mut da = DenseMatrix::zeros(up.rows(), up.cols());
                for r in 0..up.rows() {
                    let s = sm.row(r);
                    let u = up.row(r);
                    let dot = s
                        .iter()
                        .zip(u)
                        .fold(T::zero(), |acc, (&si, &ui)| acc + si * ui);
                    for (j, x) in da.row_mut(r).iter_mut().enumerate() {
                        *x = s[j] * (u[j] - dot);
                    }
                }
                self.accum_owned(a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                x_hat,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let inv_std = inv_std.clone();
                let x_hat = x_hat.clone();
                let (rows, cols) = up.shape();
                let n = T::cast(cols as f64);
                if self.needs(gain) {
                    let mut dg = DenseMatrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[(0, c)] += up[(r, c)] * x_hat[(r, c)];
                        }
                    }
                    self.accum_owned(gain, dg);
                }
                if self.needs(bias) {
                    let db = up.col_sums();
                    self.accum_owned(bias, db);
                }
                if self.needs(x) {
                    let gm = self.value(gain).clone();
                    let mut dx = DenseMatrix::zeros(rows, cols);
                    for r in 0..rows {
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        for c in 0..cols {
                            let dxh = up[(r, c)] * gm[(0, c)];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * x_hat[(r, c)];
                        }
                        mean_dxhat = mean_dxhat / n;
                        mean_dxhat_xhat = mean_dxhat_xhat / n;
                        for c in 0..cols {
                            let dxh = up[(r, c)] * gm[(0, c)];
                            dx[(r, c)] = inv_std[r]
                                * (dxh - mean_dxhat - x_hat[(r, c)] * mean_dxhat_xhat);
                        }
                    }
                    self.accum_owned(x, dx);
                }
            }
            Op::MeanRows(a) => {
                let a = *a;
                let rows = self.value(a).rows();
                let k = T::one() / T::cast(rows as f64);
                let mut da = DenseMatrix::zeros(rows, up.cols());
                for r in 0..rows {
                    for (c, x) in da.row_mut(r).iter_mut().enumerate() {
                        *x = up[(0, c)] * k;
                    }
                }
                self.accum_owned(a, da);
            }
            Op::GatherRows(a, idx) => {
                let a = *a;
                if !self.needs(a) {
                    return;
                }
                let idx = idx.clone();
                let mut ga = self.take_grad_buffer(a);
                for (r, &i) in idx.iter().enumerate() {
                    let dst = ga.row_mut(i);
                    for (d, &u) in dst.iter_mut().zip(up.row(r)) {
                        *d += u;
                    }
                }
                self.nodes[a.0].grad = Some(ga);
            }
            Op::ScatterRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let mut dx = DenseMatrix::zeros(idx.len(), up.cols());
                for (r, &i) in idx.iter().enumerate() {
                    dx.row_mut(r).copy_from_slice(up.row(i));
                }
                self.accum_owned(x, dx);
            }
            Op::SliceCols(a, start) => {
                let (a, start) = (*a, *start);
                if !self.needs(a) {
                    return;
                }
                let mut ga = self.take_grad_buffer(a);
                for r in 0..up.rows() {
                    for c in 0..up.cols() {
                        ga[(r, start + c)] += up[(r, c)];
                    }
                }
                self.nodes[a.0].grad = Some(ga);
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut at = 0;
                for p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let dp = DenseMatrix::from_fn(rows, up.cols(), |r, c| up[(at + r, c)]);
                        self.accum_owned(p, dp);
                    }
                    at += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut at = 0;
                for p in parts {
                    let cols = self.value(p).cols();
                    if self.needs(p) {
                        let dp = DenseMatrix::from_fn(up.rows(), cols, |r, c| up[(r, at + c)]);
                        self.accum_owned(p, dp);
                    }
                    at += cols;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                let labels = labels.clone();
                let probs = probs.clone();
                let k = up[(0, 0)] / T::cast(labels.len() as f64);
                let mut dl = probs;
                for (r, &y) in labels.iter().enumerate() {
                    dl[(r, y)] -= T::one();
                }
                let dl = dl.scale(k);
                self.accum_owned(logits, dl);
            }
            Op::MseConst { x, target } => {
                let x = *x;
                let target = target.clone();
                let xm = self.value(x);
                let n = T::cast((xm.rows() * xm.cols()) as f64);
                let k = up[(0, 0)] * T::cast(2.0) / n;
                let dx = xm.sub(&target).scale(k);
                self.accum_owned(x, dx);
            }
            Op::PairwiseDistance { x, e, metric } => {
                let (x, e, metric) = (*x, *e, *metric);
                let xm = self.value(x).clone();
                let em = self.value(e).clone();
                let diff = |i: usize, j: usize, c: usize| -> T {
                    let d = xm[(i, c)] - em[(j, c)];
                    match metric {
                        PairMetric::L1 => {
                            if d > T::zero() {
                                T::one()
                            } else if d < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }
                        PairMetric::HalfSqL2 => d,
                    }
                };
                if self.needs(x) {
                    let mut dx = DenseMatrix::zeros(xm.rows(), xm.cols());
                    for i in 0..xm.rows() {
                        for j in 0..em.rows() {
                            let u = up[(i, j)];
                            for c in 0..xm.cols() {
                                dx[(i, c)] += u * diff(i, j, c);
                            }
                        }
                    }
                    self.accum_owned(x, dx);
                }
                if self.needs(e) {
                    let mut de = DenseMatrix::zeros(em.rows(), em.cols());
                    for i in 0..xm.rows() {
                        for j in 0..em.rows() {
                            let u = up[(i, j)];
                            for c in 0..em.cols() {
                                de[(j, c)] -= u * diff(i, j, c);
                            }
                        }
                    }
                    self.accum_owned(e, de);
                }
            }
            Op::RecipEntropyMean(s) => {
                let s = *s;
                let sm = self.value(s).clone();
                let rows = sm.rows();
                let k = up[(0, 0)] / T::cast(rows as f64);
                let floor = T::cast(1e-300).max(T::min_positive_value());
                let mut ds = DenseMatrix::zeros(rows, sm.cols());
                for r in 0..rows {
                    let h = crate::ops::entropy_of_probs(sm.row(r));
                    let h2 = h * h;
                    for (c, x) in ds.row_mut(r).iter_mut().enumerate() {
                        let p = sm[(r, c)].max(floor);
                        // d(1/H)/dp = H^{-2} (ln p + 1)
                        *x = k * (p.ln() + T::one()) / h2;
                    }
                }
                self.accum_owned(s, ds);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Mat;

    #[test]
    fn residual_matmul_gradient() {
        // loss = mean((x·w + x) squared error to 0) has a closed-form grad;
        // check a simple case by hand: x 1x1, w 1x1.
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(Mat::from_vec(1, 1, vec![3.0]).unwrap());
        let w = g.param(Mat::from_vec(1, 1, vec![2.0]).unwrap());
        let xw = g.matmul(x, w);
        let y = g.add(xw, x); // y = xw + x = 9
        let loss = g.mse_const(y, Mat::zeros(1, 1)); // (xw + x)^2 = 81
        assert_eq!(g.value(loss)[(0, 0)], 81.0);
        g.backward(loss);
        // d/dx = 2(xw+x)(w+1) = 2*9*3 = 54 ; d/dw = 2(xw+x)x = 54
        assert_eq!(g.grad(x)[(0, 0)], 54.0);
        assert_eq!(g.grad(w)[(0, 0)], 54.0);
    }

    #[test]
    fn gather_scatter_roundtrip_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(Mat::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let picked = g.gather_rows(x, vec![2, 0, 2]);
        let spread = g.scatter_rows(picked, vec![0, 1, 1], 2);
        let loss = g.mse_const(spread, Mat::zeros(2, 2));
        g.backward(loss);
        // spread = [[5,6],[1+5, 2+6]]; d spread = 2*spread/4
        let gx = g.grad(x);
        // row 0 of x appears once (scattered to row 1): grad = spread[1]/2
        assert!((gx[(0, 0)] - 3.0).abs() < 1e-12);
        assert!((gx[(0, 1)] - 4.0).abs() < 1e-12);
        // row 1 unused
        assert_eq!(gx[(1, 0)], 0.0);
        // row 2 appears twice: spread[0]/2 + spread[1]/2
        assert!((gx[(2, 0)] - (2.5 + 3.0)).abs() < 1e-12);
    }
}
