//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a `1 × 1` result walks the record in reverse and
//! returns the gradient of that scalar with respect to every node that was
//! created through [`Tape::param`] (or depends on one).
//!
//! Only the operations the training objectives need are provided. Each one
//! is small enough that its adjoint can be checked against central finite
//! differences, which is what the unit tests at the bottom do.

use std::cell::{Ref, RefCell};
use std::ops::{Add, Mul, Neg, Sub};

use ndarray::{Array2, Axis, Zip};

pub type Matrix = Array2<f64>;

/// Smallest argument fed to `ln`; anything below is clamped.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    RowSum(usize),
    Sum(usize),
    Mean(usize),
    NormalizeRows(usize, f64),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    GatherRows(usize, Vec<usize>),
    IndexAddRows(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Records operations for a single forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var(#{}, {}x{})", self.id, r, c)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, or `None` when the root
    /// does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Matrix> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but returns zeros of the right shape.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Matrix {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Matrix::zeros(var.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that gradients flow into.
    pub fn param(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::from_elem((1, 1), value))
    }

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, value: Matrix, op: Op, parents: &[usize]) -> Var<'_> {
        let rg = parents.iter().any(|&p| self.requires_grad(p));
        self.push(value, op, rg)
    }

    /// Reverse pass from a `1 × 1` root.
    ///
    /// # Panics
    /// If `root` is not a scalar or belongs to another tape.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.dim(), (1, 1), "backward needs a scalar root");

        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[root.id] = Some(Matrix::ones((1, 1)));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |p: usize| nodes[p].requires_grad;
            let val = |p: usize| &nodes[p].value;

            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                &Op::MatMul(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads, a, g.dot(&val(b).t()));
                    }
                    if needs(b) {
                        accumulate(&mut grads, b, val(a).t().dot(&g));
                    }
                }
                &Op::MatMulT(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads, a, g.dot(val(b)));
                    }
                    if needs(b) {
                        accumulate(&mut grads, b, g.t().dot(val(a)));
                    }
                }
                &Op::Transpose(a) => accumulate(&mut grads, a, g.t().to_owned()),
                &Op::Add(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if needs(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                &Op::Sub(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if needs(b) {
                        accumulate(&mut grads, b, -g);
                    }
                }
                &Op::Mul(a, b) => {
                    if needs(a) {
                        accumulate(&mut grads, a, &g * val(b));
                    }
                    if needs(b) {
                        accumulate(&mut grads, b, &g * val(a));
                    }
                }
                &Op::AddRow(a, b) => {
                    if needs(b) {
                        accumulate(&mut grads, b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if needs(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                &Op::Scale(a, c) => accumulate(&mut grads, a, g * c),
                &Op::AddScalar(a) => accumulate(&mut grads, a, g),
                &Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(a)).for_each(|gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    accumulate(&mut grads, a, ga);
                }
                &Op::Exp(a) => accumulate(&mut grads, a, g * &node.value),
                &Op::Ln(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(a)).for_each(|gi, &x| {
                        *gi = if x > LOG_FLOOR { *gi / x } else { 0.0 };
                    });
                    accumulate(&mut grads, a, ga);
                }
                &Op::RowSum(a) => {
                    let shape = val(a).dim();
                    let ga = g.broadcast(shape).expect("row-sum broadcast").to_owned();
                    accumulate(&mut grads, a, ga);
                }
                &Op::Sum(a) => {
                    let ga = Matrix::from_elem(val(a).dim(), g[[0, 0]]);
                    accumulate(&mut grads, a, ga);
                }
                &Op::Mean(a) => {
                    let x = val(a);
                    let ga = Matrix::from_elem(x.dim(), g[[0, 0]] / x.len() as f64);
                    accumulate(&mut grads, a, ga);
                }
                &Op::NormalizeRows(a, eps) => {
                    let x = val(a);
                    let mut ga = Matrix::zeros(x.dim());
                    for ((xr, gr), mut out) in x.outer_iter().zip(g.outer_iter()).zip(ga.outer_iter_mut()) {
                        let r = xr.dot(&xr).sqrt();
                        let denom = r + eps;
                        let gx = gr.dot(&xr);
                        let corr = if r > 0.0 { gx / (r * denom * denom) } else { 0.0 };
                        Zip::from(&mut out)
                            .and(&gr)
                            .and(&xr)
                            .for_each(|o, &gi, &xi| *o = gi / denom - xi * corr);
                    }
                    accumulate(&mut grads, a, ga);
                }
                &Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dots = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dots);
                    accumulate(&mut grads, a, ga);
                }
                &Op::LogSoftmaxRows(a) => {
                    let soft = node.value.mapv(f64::exp);
                    let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &g - &(&soft * &gsum);
                    accumulate(&mut grads, a, ga);
                }
                Op::GatherRows(a, rows) => {
                    let a = *a;
                    let mut ga = Matrix::zeros(val(a).dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::IndexAddRows(a, rows) => {
                    let a = *a;
                    let ga = g.select(Axis(0), rows);
                    accumulate(&mut grads, a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        if needs(p) {
                            let slice = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                            accumulate(&mut grads, p, slice);
                        }
                        offset += w;
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn same_shape(a: &Var<'_>, b: &Var<'_>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: operand shapes differ");
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value_ref(self.id).dim()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// Owned copy of the current value.
    pub fn value(&self) -> Matrix {
        self.tape.value_ref(self.id).clone()
    }

    /// Value of a `1 × 1` variable.
    pub fn item(&self) -> f64 {
        let v = self.tape.value_ref(self.id);
        assert_eq!(v.dim(), (1, 1), "item() on a non-scalar");
        v[[0, 0]]
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Matrix) -> R) -> R {
        f(&self.tape.value_ref(self.id))
    }

    /// Same value, cut off from the gradient graph.
    pub fn detach(self) -> Var<'t> {
        let v = self.value();
        self.tape.constant(v)
    }

    fn unary(self, op: Op, f: impl FnOnce(&Matrix) -> Matrix) -> Var<'t> {
        let value = f(&self.tape.value_ref(self.id));
        self.tape.record(value, op, &[self.id])
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl FnOnce(&Matrix, &Matrix) -> Matrix) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape));
        let value = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            f(&a, &b)
        };
        self.tape.record(value, op, &[self.id, other.id])
    }

    /// `self · rhs`
    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        assert_eq!(self.cols(), rhs.rows(), "matmul: inner dimensions differ");
        self.binary(rhs, Op::MatMul(self.id, rhs.id), |a, b| a.dot(b))
    }

    /// `self · rhsᵀ`
    pub fn matmul_t(self, rhs: Var<'t>) -> Var<'t> {
        assert_eq!(self.cols(), rhs.cols(), "matmul_t: inner dimensions differ");
        self.binary(rhs, Op::MatMulT(self.id, rhs.id), |a, b| a.dot(&b.t()))
    }

    pub fn t(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), |a| a.t().to_owned())
    }

    /// Adds a `1 × m` row to every row of `self`.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        assert_eq!(row.rows(), 1, "add_row: bias must have one row");
        assert_eq!(self.cols(), row.cols(), "add_row: width mismatch");
        self.binary(row, Op::AddRow(self.id, row.id), |a, b| a + b)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |a| a * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |a| a + c)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |a| a.mapv(|x| x.max(0.0)))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |a| a.mapv(f64::exp))
    }

    /// Natural log with the argument clamped below at [`LOG_FLOOR`].
    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln(self.id), |a| a.mapv(|x| x.max(LOG_FLOOR).ln()))
    }

    /// `n × m → n × 1`
    pub fn row_sum(self) -> Var<'t> {
        self.unary(Op::RowSum(self.id), |a| a.sum_axis(Axis(1)).insert_axis(Axis(1)))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Matrix::from_elem((1, 1), a.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |a| {
            assert!(!a.is_empty(), "mean of an empty matrix");
            Matrix::from_elem((1, 1), a.sum() / a.len() as f64)
        })
    }

    /// Divides each row by `‖row‖ + eps`.
    pub fn normalize_rows(self, eps: f64) -> Var<'t> {
        self.unary(Op::NormalizeRows(self.id, eps), |a| normalize_rows(a, eps))
    }

    pub fn softmax_rows(self) -> Var<'t> {
        self.unary(Op::SoftmaxRows(self.id), softmax_rows)
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        self.unary(Op::LogSoftmaxRows(self.id), log_softmax_rows)
    }

    pub fn gather_rows(self, rows: &[usize]) -> Var<'t> {
        let n = self.rows();
        assert!(rows.iter().all(|&r| r < n), "gather_rows: index out of range");
        self.unary(Op::GatherRows(self.id, rows.to_vec()), |a| a.select(Axis(0), rows))
    }

    /// Zero matrix with `n_rows` rows where row `rows[k]` accumulates row `k`
    /// of `self`.
    pub fn index_add_rows(self, rows: &[usize], n_rows: usize) -> Var<'t> {
        assert_eq!(self.rows(), rows.len(), "index_add_rows: one index per row");
        assert!(rows.iter().all(|&r| r < n_rows), "index_add_rows: index out of range");
        self.unary(Op::IndexAddRows(self.id, rows.to_vec()), |a| {
            let mut out = Matrix::zeros((n_rows, a.ncols()));
            for (k, &r) in rows.iter().enumerate() {
                let mut dst = out.row_mut(r);
                dst += &a.row(k);
            }
            out
        })
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let tape = parts[0].tape;
        let value = {
            let views: Vec<Ref<'_, Matrix>> = parts.iter().map(|p| tape.value_ref(p.id)).collect();
            let plain: Vec<_> = views.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(1), &plain).expect("concat_cols: row counts differ")
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.record(value, Op::ConcatCols(ids.clone()), &ids)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        same_shape(&self, &rhs, "add");
        self.binary(rhs, Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        same_shape(&self, &rhs, "sub");
        self.binary(rhs, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        same_shape(&self, &rhs, "mul");
        self.binary(rhs, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

pub fn normalize_rows(a: &Matrix, eps: f64) -> Matrix {
    let mut out = a.clone();
    for mut row in out.outer_iter_mut() {
        let norm = row.dot(&row).sqrt();
        row /= norm + eps;
    }
    out
}

pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

pub fn log_softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Scalar function of several matrices evaluated through the tape.
    pub(crate) fn eval<F>(inputs: &[Matrix], f: &F) -> (f64, Vec<Matrix>)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&tape, &vars);
        let value = out.item();
        let grads = tape.backward(out);
        let gs = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
        (value, gs)
    }

    pub(crate) fn finite_difference_check<F>(inputs: &[Matrix], f: F, h: f64) -> f64
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    {
        let (_, analytic) = eval(inputs, &f);
        let mut worst: f64 = 0.0;
        for (which, input) in inputs.iter().enumerate() {
            for idx in 0..input.len() {
                let (r, c) = (idx / input.ncols(), idx % input.ncols());
                let mut plus = inputs.to_vec();
                plus[which][[r, c]] += h;
                let mut minus = inputs.to_vec();
                minus[which][[r, c]] -= h;
                let fd = (eval(&plus, &f).0 - eval(&minus, &f).0) / (2.0 * h);
                let g = analytic[which][[r, c]];
                let err = (g - fd).abs() / 1f64.max(g.abs()).max(fd.abs());
                worst = worst.max(err);
            }
        }
        worst
    }
}
