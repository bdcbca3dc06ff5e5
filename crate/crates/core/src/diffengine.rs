//! Reverse-mode differentiation over a recorded tape of dense matrix ops.
//!
//! Every node holds a `rows × cols` matrix. Training batches are laid out
//! column-wise (one column per sample), so one tape carries a whole batch
//! and the per-sample computations never mix except through explicit
//! reductions ([`Tape::sum`]). The vocabulary is deliberately small: matrix
//! products, bias/broadcast arithmetic, the `σ`/`tanh`/`|·|` nonlinearities,
//! column reductions, row slicing, and problem-specific column-wise ops
//! that must be registered by name before use.
//!
//! The value-function gradient `∇ₛΦ` appears inside the training loss. It is
//! written out as an explicit first-order computation ([`taped_phi`]) and
//! differentiated once in reverse, which avoids nested tapes.

use crate::error::{Error, Result};
use crate::linalg::{gemm, Mat};
use crate::valuefn::ValueFnParams;
use std::collections::HashMap;
use std::fmt;
use std::ops::{Deref, DerefMut};
use std::sync::Arc;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A column-wise operation supplied by a problem definition: maps each
/// input column independently to an output column.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn output_rows(&self, input_rows: usize) -> Result<usize>;
    fn forward(&self, input: &Mat) -> Mat;
    /// Vector-Jacobian product: gradient with respect to `input` given the
    /// gradient `out_grad` of the output.
    fn backward(&self, input: &Mat, output: &Mat, out_grad: &Mat) -> Mat;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Const,
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LogCosh(Var),
    Tanh(Var),
    Abs(Var),
    MulCol(Var, Var),
    MulRow(Var, Var),
    ColSqNorm(Var),
    ColNorm(Var),
    ColSum(Var),
    Sum(Var),
    SliceRows { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    Custom(Arc<dyn CustomOp>, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::MatMul { .. } => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::LogCosh(_) => "logcosh",
            Op::Tanh(_) => "tanh",
            Op::Abs(_) => "abs",
            Op::MulCol(..) => "mul_col",
            Op::MulRow(..) => "mul_row",
            Op::ColSqNorm(_) => "col_sq_norm",
            Op::ColNorm(_) => "col_norm",
            Op::ColSum(_) => "col_sum",
            Op::Sum(_) => "sum",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::Custom(op, _) => op.name(),
        }
    }
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation with registered custom ops.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    registry: HashMap<&'static str, Arc<dyn CustomOp>>,
    first_non_finite: Option<(usize, &'static str)>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("registered", &self.registry.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, op: Arc<dyn CustomOp>) {
        self.registry.insert(op.name(), op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Const => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((idx, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(idx)
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Const => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulCol(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::LogCosh(a)
            | Op::Tanh(a)
            | Op::Abs(a)
            | Op::ColSqNorm(a)
            | Op::ColNorm(a)
            | Op::ColSum(a)
            | Op::Sum(a)
            | Op::Custom(_, a) => vec![*a],
            Op::SliceRows { src, .. } => vec![*src],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let m = if trans_a { av.cols } else { av.rows };
        let n = if trans_b { bv.rows } else { bv.cols };
        let mut out = Mat::zeros(m, n);
        gemm(1.0, av, trans_a, bv, trans_b, 0.0, &mut out);
        self.push(
            out,
            Op::MatMul {
                a,
                ta: trans_a,
                b,
                tb: trans_b,
            },
        )
    }

    /// `a + bias·𝟙ᵀ` with `bias` an `r × 1` column.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(bias);
        assert_eq!((bv.rows, bv.cols), (av.rows, 1), "add_bias shape");
        let mut out = av.clone();
        for i in 0..out.rows {
            let bi = bv.data[i];
            out.row_mut(i).iter_mut().for_each(|x| *x += bi);
        }
        self.push(out, Op::AddBias(a, bias))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "{} shape", op.name());
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        self.push(out, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let out = Mat::from_vec(av.rows, av.cols, av.data.iter().map(|&x| f(x)).collect());
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    /// `a + c·b`.
    pub fn axpy(&mut self, a: Var, c: f64, b: Var) -> Var {
        let cb = self.scale(b, c);
        self.add(a, cb)
    }

    /// Elementwise `σ(x) = log(eˣ + e⁻ˣ)`.
    pub fn logcosh(&mut self, a: Var) -> Var {
        self.map(a, |x| crate::valuefn::activation(x).0, Op::LogCosh(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// Elementwise `|x|`, with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    /// `a ⊙ (col·𝟙ᵀ)` with `col` an `r × 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let av = self.value(a);
        let cv = self.value(col);
        assert_eq!((cv.rows, cv.cols), (av.rows, 1), "mul_col shape");
        let mut out = av.clone();
        for i in 0..out.rows {
            let ci = cv.data[i];
            out.row_mut(i).iter_mut().for_each(|x| *x *= ci);
        }
        self.push(out, Op::MulCol(a, col))
    }

    /// `a ⊙ (𝟙·row)` with `row` a `1 × B` row: scales each column.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!((rv.rows, rv.cols), (1, av.cols), "mul_row shape");
        let mut out = av.clone();
        for i in 0..out.rows {
            out.row_mut(i)
                .iter_mut()
                .zip(&rv.data)
                .for_each(|(x, r)| *x *= r);
        }
        self.push(out, Op::MulRow(a, row))
    }

    fn column_reduce(&mut self, a: Var, f: impl Fn(&[f64]) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let mut cols = vec![Vec::with_capacity(av.rows); av.cols];
        for i in 0..av.rows {
            for (j, &x) in av.row(i).iter().enumerate() {
                cols[j].push(x);
            }
        }
        let data = cols.iter().map(|c| f(c)).collect();
        let out = Mat::from_vec(1, av.cols, data);
        self.push(out, op)
    }

    /// Per-column squared Euclidean norm, `1 × B`.
    pub fn col_sq_norm(&mut self, a: Var) -> Var {
        self.column_reduce(a, |c| c.iter().map(|x| x * x).sum(), Op::ColSqNorm(a))
    }

    /// Per-column Euclidean norm, `1 × B`; subgradient 0 at the origin.
    pub fn col_norm(&mut self, a: Var) -> Var {
        self.column_reduce(
            a,
            |c| c.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Op::ColNorm(a),
        )
    }

    /// Per-column sum, `1 × B`.
    pub fn col_sum(&mut self, a: Var) -> Var {
        self.column_reduce(a, |c| c.iter().sum(), Op::ColSum(a))
    }

    /// Sum of all entries in row-major order, `1 × 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Mat::scalar(s), Op::Sum(a))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Var {
        let sv = self.value(src);
        assert!(start + len <= sv.rows, "slice_rows out of range");
        let data = sv.data[start * sv.cols..(start + len) * sv.cols].to_vec();
        let out = Mat::from_vec(len, sv.cols, data);
        self.push(out, Op::SliceRows { src, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows column count");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Applies a registered column-wise op by name.
    pub fn custom(&mut self, name: &str, a: Var) -> Result<Var> {
        let op = self
            .registry
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("operation `{name}` is not registered with the tape")))?;
        let rows = op.output_rows(self.value(a).rows)?;
        let out = op.forward(self.value(a));
        debug_assert_eq!(out.rows, rows);
        Ok(self.push(out, Op::Custom(op, a)))
    }

    /// First non-finite intermediate, if any was produced.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check_finite()?;
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::Config(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Mat::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            // Interior gradients are not needed after propagation.
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Const => {}
            &Op::MatMul { a, ta, b, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let slot = grad_slot(grads, a, av.rows, av.cols);
                    if ta {
                        gemm(1.0, bv, tb, g, true, 1.0, slot);
                    } else {
                        gemm(1.0, g, false, bv, !tb, 1.0, slot);
                    }
                }
                if self.wants(b) {
                    let slot = grad_slot(grads, b, bv.rows, bv.cols);
                    if tb {
                        gemm(1.0, g, true, av, ta, 1.0, slot);
                    } else {
                        gemm(1.0, av, !ta, g, false, 1.0, slot);
                    }
                }
            }
            &Op::AddBias(a, bias) => {
                if self.wants(a) {
                    accumulate(grads, a, g, 1.0);
                }
                if self.wants(bias) {
                    let slot = grad_slot(grads, bias, g.rows, 1);
                    for i in 0..g.rows {
                        slot.data[i] += g.row(i).iter().sum::<f64>();
                    }
                }
            }
            &Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g, 1.0);
                }
                if self.wants(b) {
                    accumulate(grads, b, g, 1.0);
                }
            }
            &Op::Sub(a, b) => {
                if self.wants(a) {
                    accumulate(grads, a, g, 1.0);
                }
                if self.wants(b) {
                    accumulate(grads, b, g, -1.0);
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    accumulate_zip(grads, a, g, self.value(b), |gi, bi| gi * bi);
                }
                if self.wants(b) {
                    accumulate_zip(grads, b, g, self.value(a), |gi, ai| gi * ai);
                }
            }
            &Op::Scale(a, c) => accumulate(grads, a, g, c),
            &Op::LogCosh(a) => accumulate_zip(grads, a, g, self.value(a), |gi, x| gi * x.tanh()),
            &Op::Tanh(a) => accumulate_zip(grads, a, g, &node.value, |gi, y| gi * (1.0 - y * y)),
            &Op::Abs(a) => accumulate_zip(grads, a, g, self.value(a), |gi, x| {
                if x > 0.0 {
                    gi
                } else if x < 0.0 {
                    -gi
                } else {
                    0.0
                }
            }),
            &Op::MulCol(a, col) => {
                let (av, cv) = (self.value(a), self.value(col));
                if self.wants(a) {
                    let slot = grad_slot(grads, a, av.rows, av.cols);
                    for i in 0..av.rows {
                        let ci = cv.data[i];
                        for (s, gi) in slot.row_mut(i).iter_mut().zip(g.row(i)) {
                            *s += gi * ci;
                        }
                    }
                }
                if self.wants(col) {
                    let slot = grad_slot(grads, col, cv.rows, 1);
                    for i in 0..av.rows {
                        slot.data[i] += g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            &Op::MulRow(a, row) => {
                let (av, rv) = (self.value(a), self.value(row));
                if self.wants(a) {
                    let slot = grad_slot(grads, a, av.rows, av.cols);
                    for i in 0..av.rows {
                        for ((s, gi), r) in slot.row_mut(i).iter_mut().zip(g.row(i)).zip(&rv.data) {
                            *s += gi * r;
                        }
                    }
                }
                if self.wants(row) {
                    let slot = grad_slot(grads, row, 1, rv.cols);
                    for i in 0..av.rows {
                        for ((s, gi), x) in slot.data.iter_mut().zip(g.row(i)).zip(av.row(i)) {
                            *s += gi * x;
                        }
                    }
                }
            }
            &Op::ColSqNorm(a) => {
                let av = self.value(a);
                let slot = grad_slot(grads, a, av.rows, av.cols);
                for i in 0..av.rows {
                    for ((s, x), gj) in slot.row_mut(i).iter_mut().zip(av.row(i)).zip(&g.data) {
                        *s += 2.0 * x * gj;
                    }
                }
            }
            &Op::ColNorm(a) => {
                let av = self.value(a);
                let norms = &node.value.data;
                let slot = grad_slot(grads, a, av.rows, av.cols);
                for i in 0..av.rows {
                    for (((s, x), gj), nj) in slot.row_mut(i).iter_mut().zip(av.row(i)).zip(&g.data).zip(norms) {
                        if *nj > 0.0 {
                            *s += x / nj * gj;
                        }
                    }
                }
            }
            &Op::ColSum(a) => {
                let av = self.value(a);
                let slot = grad_slot(grads, a, av.rows, av.cols);
                for i in 0..av.rows {
                    for (s, gj) in slot.row_mut(i).iter_mut().zip(&g.data) {
                        *s += gj;
                    }
                }
            }
            &Op::Sum(a) => {
                let av = self.value(a);
                let gi = g.data[0];
                let slot = grad_slot(grads, a, av.rows, av.cols);
                slot.data.iter_mut().for_each(|s| *s += gi);
            }
            &Op::SliceRows { src, start } => {
                let sv = self.value(src);
                let slot = grad_slot(grads, src, sv.rows, sv.cols);
                let off = start * sv.cols;
                for (s, gi) in slot.data[off..off + g.data.len()].iter_mut().zip(&g.data) {
                    *s += gi;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.data.len();
                    if self.wants(p) {
                        let slot = grad_slot(grads, p, pv.rows, pv.cols);
                        for (s, gi) in slot.data.iter_mut().zip(&g.data[off..off + n]) {
                            *s += gi;
                        }
                    }
                    off += n;
                }
            }
            Op::Custom(op, a) => {
                let gin = op.backward(self.value(*a), &node.value, g);
                accumulate(grads, *a, &gin, 1.0);
            }
        }
    }
}

fn grad_slot(grads: &mut [Option<Mat>], v: Var, rows: usize, cols: usize) -> &mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(rows, cols))
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: &Mat, c: f64) {
    match &mut grads[v.0] {
        Some(slot) => {
            for (s, x) in slot.data.iter_mut().zip(&g.data) {
                *s += c * x;
            }
        }
        empty @ None => {
            let mut m = g.clone();
            if c != 1.0 {
                m.data.iter_mut().for_each(|x| *x *= c);
            }
            *empty = Some(m);
        }
    }
}

fn accumulate_zip(grads: &mut [Option<Mat>], v: Var, g: &Mat, other: &Mat, f: impl Fn(f64, f64) -> f64) {
    let slot = grad_slot(grads, v, g.rows, g.cols);
    for ((s, gi), o) in slot.data.iter_mut().zip(&g.data).zip(&other.data) {
        *s += f(*gi, *o);
    }
}

/// Result of a reverse sweep; holds gradients of leaves.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero-filled when the output does not depend on it.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(rows, cols))
    }
}

/// Gradient with the same tensor layout as [`ValueFnParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct FlatGradient(pub ValueFnParams);

impl Deref for FlatGradient {
    type Target = ValueFnParams;
    fn deref(&self) -> &ValueFnParams {
        &self.0
    }
}

impl DerefMut for FlatGradient {
    fn deref_mut(&mut self) -> &mut ValueFnParams {
        &mut self.0
    }
}

impl FlatGradient {
    pub fn zeros_like(params: &ValueFnParams) -> Self {
        FlatGradient(ValueFnParams::zeros(params.d, params.m))
    }

    pub fn is_finite(&self) -> bool {
        self.0.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Adds another gradient in place, tensor by tensor in canonical order.
    pub fn add_assign(&mut self, other: &FlatGradient) {
        for (dst, src) in self.0.tensors_mut().into_iter().zip(other.0.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

/// Leaves for every parameter tensor of the value function.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub d: usize,
    pub m: usize,
    pub w: Var,
    pub k0: Var,
    pub k1: Var,
    pub b0: Var,
    pub b1: Var,
    pub a: Var,
    pub b: Var,
    pub c: Var,
}

impl ParamVars {
    /// Records all parameters as leaves (`trainable`) or constants.
    pub fn record(tape: &mut Tape, p: &ValueFnParams, trainable: bool) -> Self {
        let mut put = |m: Mat| if trainable { tape.leaf(m) } else { tape.constant(m) };
        ParamVars {
            d: p.d,
            m: p.m,
            w: put(Mat::column(p.w.clone())),
            k0: put(p.k0.clone()),
            k1: put(p.k1.clone()),
            b0: put(Mat::column(p.b0.clone())),
            b1: put(Mat::column(p.b1.clone())),
            a: put(p.a.clone()),
            b: put(Mat::column(p.b.clone())),
            c: put(Mat::scalar(p.c)),
        }
    }

    /// Collects leaf gradients into parameter layout.
    pub fn gradient(&self, grads: &Gradients, like: &ValueFnParams) -> FlatGradient {
        let mut out = FlatGradient::zeros_like(like);
        let vars = [self.w, self.k0, self.k1, self.b0, self.b1, self.a, self.b, self.c];
        for (slot, v) in out.0.tensors_mut().into_iter().zip(vars) {
            if let Some(g) = grads.get(v) {
                slot.copy_from_slice(&g.data);
            }
        }
        out
    }
}

/// Tape nodes for `Φ`, `∇ₓΦ` and `∂ₜΦ` over a batch of states.
#[derive(Clone, Copy, Debug)]
pub struct TapedPhi {
    /// `1 × B`, only when requested.
    pub phi: Option<Var>,
    /// `d × B`.
    pub grad_x: Var,
    /// `1 × B`.
    pub dphi_dt: Var,
}

/// Records `Φ(z, t)` and its exact space-time gradient for the `d × B`
/// state batch `z` at the common time `t`.
pub fn taped_phi(tape: &mut Tape, pv: &ParamVars, z: Var, t: f64, with_value: bool) -> TapedPhi {
    let batch = tape.value(z).cols;
    let time_row = tape.constant(Mat::filled(1, batch, t));
    let s = tape.concat_rows(&[z, time_row]);
    taped_phi_at(tape, pv, s, with_value)
}

/// As [`taped_phi`] for an explicit `(d+1) × B` space-time batch.
pub fn taped_phi_at(tape: &mut Tape, pv: &ParamVars, s: Var, with_value: bool) -> TapedPhi {
    let k0s = tape.matmul(pv.k0, false, s, false);
    let pre0 = tape.add_bias(k0s, pv.b0);
    let a0 = tape.logcosh(pre0);
    let k1a = tape.matmul(pv.k1, false, a0, false);
    let pre1 = tape.add_bias(k1a, pv.b1);
    let as_ = tape.matmul(pv.a, false, s, false);

    let phi = with_value.then(|| {
        let a1 = tape.logcosh(pre1);
        let n = tape.add(a0, a1);
        let wn = tape.matmul(pv.w, true, n, false);
        let sq = tape.col_sq_norm(as_);
        let quad = tape.scale(sq, 0.5);
        let lin = tape.matmul(pv.b, true, s, false);
        let v = tape.add(wn, quad);
        let v = tape.add(v, lin);
        tape.add_bias(v, pv.c)
    });

    // ∇ₛΦ = K0ᵀ[σ'(pre0) ⊙ (w + K1ᵀ(σ'(pre1) ⊙ w))] + AᵀA s + b
    let sp1 = tape.tanh(pre1);
    let t1 = tape.mul_col(sp1, pv.w);
    let k1t = tape.matmul(pv.k1, true, t1, false);
    let inner = tape.add_bias(k1t, pv.w);
    let sp0 = tape.tanh(pre0);
    let g0 = tape.mul(sp0, inner);
    let net = tape.matmul(pv.k0, true, g0, false);
    let quad = tape.matmul(pv.a, true, as_, false);
    let grad = tape.add(net, quad);
    let grad = tape.add_bias(grad, pv.b);

    let d = pv.d;
    TapedPhi {
        phi,
        grad_x: tape.slice_rows(grad, 0, d),
        dphi_dt: tape.slice_rows(grad, d, 1),
    }
}

/// Value and parameter gradient of a scalar loss built on a fresh tape.
///
/// `build` receives the tape (with `registered` ops installed) and the
/// parameter leaves and must return a `1 × 1` node.
pub fn grad_theta<F>(
    params: &ValueFnParams,
    registered: &[Arc<dyn CustomOp>],
    build: F,
) -> Result<(f64, FlatGradient)>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
{
    params.validate()?;
    let mut tape = Tape::new();
    for op in registered {
        tape.register(op.clone());
    }
    let pv = ParamVars::record(&mut tape, params, true);
    let loss = build(&mut tape, &pv)?;
    let grads = tape.backward(loss)?;
    let g = pv.gradient(&grads, params);
    if !g.is_finite() {
        return Err(Error::NonFinite {
            op: "backward",
            node: loss.index(),
        });
    }
    Ok((tape.scalar(loss), g))
}
