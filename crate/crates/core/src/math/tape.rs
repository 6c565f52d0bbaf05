//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. Nodes are appended in evaluation order, so parents always
//! precede children and [`Tape::backward`] is a single reverse sweep.
//!
//! Leaves come in two flavours: constants (`Tape::constant`) and parameters
//! (`Tape::param`), the latter tagged with an index into an external
//! parameter registry so gradients can be collected per parameter.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{matmul_at, matmul_bt, matmul_raw, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    Transpose(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumSq(usize),
    /// Row `x / max(‖x‖, eps)`; saves the per-row divisor and whether the guard was active.
    NormalizeRows(usize, Vec<(f64, bool)>),
    /// Row `(x − μ) / sqrt(σ² + eps)`; the saved vector holds `1/sqrt(σ² + eps)`.
    LayerNormRows(usize, Vec<f64>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Recording of one forward pass. Not `Sync`: build one per thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(usize, usize)>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
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

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf)
    }

    /// Leaf tagged with `param_index` for gradient collection.
    pub fn param(&self, param_index: usize, value: Tensor) -> Var<'_> {
        let v = self.push_unchecked(value, Op::Leaf);
        self.params.borrow_mut().push((v.id, param_index));
        v
    }

    pub fn scalar(&self, v: f64) -> Result<Var<'_>> {
        Ok(self.constant(Tensor::scalar(v)?))
    }

    fn push_unchecked(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var { tape: self, id }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::from_parts_unchecked(1, 1, vec![1.0]));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| nodes[i].value.as_ref();
    let out = node.value.as_ref();
    let (gr, gc) = g.dims2();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = av.dims2();
            let n = bv.cols();
            let ga = matmul_bt(g.data(), bv.data(), m, n, k);
            let gb = matmul_at(av.data(), g.data(), m, k, n);
            accumulate(grads, *a, Tensor::from_parts_unchecked(m, k, ga));
            accumulate(grads, *b, Tensor::from_parts_unchecked(k, n, gb));
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            let ga = g.zip("mul", val(*b), |x, y| x * y).expect("shape");
            let gb = g.zip("mul", val(*a), |x, y| x * y).expect("shape");
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::AddRow(a, row) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *row, Tensor::from_parts_unchecked(1, gc, col_sums(g)));
        }
        Op::MulRow(a, row) => {
            let (av, rv) = (val(*a), val(*row));
            let mut ga = g.clone();
            let mut gw = vec![0.0; gc];
            for i in 0..gr {
                for j in 0..gc {
                    let gij = g.data()[i * gc + j];
                    ga.data_mut()[i * gc + j] = gij * rv.data()[j];
                    gw[j] += gij * av.data()[i * gc + j];
                }
            }
            accumulate(grads, *a, ga);
            accumulate(grads, *row, Tensor::from_parts_unchecked(1, gc, gw));
        }
        Op::MulCol(a, col) => {
            let (av, cv) = (val(*a), val(*col));
            let mut ga = g.clone();
            let mut gw = vec![0.0; gr];
            for i in 0..gr {
                for j in 0..gc {
                    let gij = g.data()[i * gc + j];
                    ga.data_mut()[i * gc + j] = gij * cv.data()[i];
                    gw[i] += gij * av.data()[i * gc + j];
                }
            }
            accumulate(grads, *a, ga);
            accumulate(grads, *col, Tensor::from_parts_unchecked(gr, 1, gw));
        }
        Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
        Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for p in parts {
                let w = val(*p).cols();
                let mut data = Vec::with_capacity(gr * w);
                for i in 0..gr {
                    data.extend_from_slice(&g.data()[i * gc + offset..i * gc + offset + w]);
                }
                accumulate(grads, *p, Tensor::from_parts_unchecked(gr, w, data));
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let h = val(*p).rows();
                let data = g.data()[offset * gc..(offset + h) * gc].to_vec();
                accumulate(grads, *p, Tensor::from_parts_unchecked(h, gc, data));
                offset += h;
            }
        }
        Op::SliceRows(a, start) => {
            let av = val(*a);
            let mut ga = Tensor::zeros_like(av);
            ga.data_mut()[start * gc..(start + gr) * gc].copy_from_slice(g.data());
            accumulate(grads, *a, ga);
        }
        Op::SliceCols(a, start) => {
            let av = val(*a);
            let ac = av.cols();
            let mut ga = Tensor::zeros_like(av);
            for i in 0..gr {
                ga.data_mut()[i * ac + start..i * ac + start + gc]
                    .copy_from_slice(&g.data()[i * gc..(i + 1) * gc]);
            }
            accumulate(grads, *a, ga);
        }
        Op::GatherRows(a, idx) => {
            let mut ga = Tensor::zeros_like(val(*a));
            for (k, &src) in idx.iter().enumerate() {
                for j in 0..gc {
                    ga.data_mut()[src * gc + j] += g.data()[k * gc + j];
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
        Op::SoftmaxRows(a) => {
            // dx = y ∘ (g − ⟨g, y⟩_row)
            let mut ga = Tensor::zeros_like(out);
            for i in 0..gr {
                let y = out.row_slice(i);
                let gi = g.row_slice(i);
                let dot: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                for j in 0..gc {
                    ga.data_mut()[i * gc + j] = y[j] * (gi[j] - dot);
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::LogSoftmaxRows(a) => {
            // dx = g − softmax · Σ g
            let mut ga = Tensor::zeros_like(out);
            for i in 0..gr {
                let y = out.row_slice(i);
                let gi = g.row_slice(i);
                let total: f64 = gi.iter().sum();
                for j in 0..gc {
                    ga.data_mut()[i * gc + j] = gi[j] - y[j].exp() * total;
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::Tanh(a) => {
            let ga = g.zip("tanh", out, |gv, y| gv * (1.0 - y * y)).expect("shape");
            accumulate(grads, *a, ga);
        }
        Op::Relu(a) => {
            let ga = g
                .zip("relu", val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })
                .expect("shape");
            accumulate(grads, *a, ga);
        }
        Op::Sigmoid(a) => {
            let ga = g.zip("sigmoid", out, |gv, y| gv * y * (1.0 - y)).expect("shape");
            accumulate(grads, *a, ga);
        }
        Op::Exp(a) => {
            let ga = g.zip("exp", out, |gv, y| gv * y).expect("shape");
            accumulate(grads, *a, ga);
        }
        Op::Log(a) => {
            let ga = g.zip("log", val(*a), |gv, x| gv / x).expect("shape");
            accumulate(grads, *a, ga);
        }
        Op::Abs(a) => {
            let ga = g
                .zip("abs", val(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })
                .expect("shape");
            accumulate(grads, *a, ga);
        }
        Op::Sum(a) => {
            let av = val(*a);
            let (r, c) = av.dims2();
            accumulate(grads, *a, Tensor::filled(r, c, g.item()));
        }
        Op::Mean(a) => {
            let av = val(*a);
            let (r, c) = av.dims2();
            accumulate(grads, *a, Tensor::filled(r, c, g.item() / (r * c) as f64));
        }
        Op::SumRows(a) => {
            let av = val(*a);
            let (r, c) = av.dims2();
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                data[i * c..(i + 1) * c].fill(g.data()[i]);
            }
            accumulate(grads, *a, Tensor::from_parts_unchecked(r, c, data));
        }
        Op::SumSq(a) => {
            let s = 2.0 * g.item();
            accumulate(grads, *a, val(*a).scale(s));
        }
        Op::NormalizeRows(a, divisors) => {
            let mut ga = Tensor::zeros_like(out);
            for i in 0..gr {
                let y = out.row_slice(i);
                let gi = g.row_slice(i);
                let (n, guarded) = divisors[i];
                // Inside the eps guard the map is a plain scaling.
                let dot: f64 = if guarded {
                    0.0
                } else {
                    y.iter().zip(gi).map(|(a, b)| a * b).sum()
                };
                for j in 0..gc {
                    ga.data_mut()[i * gc + j] = (gi[j] - y[j] * dot) / n;
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::LayerNormRows(a, inv_std) => {
            let mut ga = Tensor::zeros_like(out);
            let c = gc as f64;
            for i in 0..gr {
                let y = out.row_slice(i);
                let gi = g.row_slice(i);
                let g_mean = gi.iter().sum::<f64>() / c;
                let gy_mean = gi.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c;
                for j in 0..gc {
                    ga.data_mut()[i * gc + j] = inv_std[i] * (gi[j] - g_mean - y[j] * gy_mean);
                }
            }
            accumulate(grads, *a, ga);
        }
    }
}

fn col_sums(t: &Tensor) -> Vec<f64> {
    let (r, c) = t.dims2();
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
            *o += v;
        }
    }
    out
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` was not reached.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros_like(&v.value()),
        }
    }

    /// One accumulated gradient per registry parameter, in registry order.
    /// `shapes[i]` gives the shape of parameter `i`; unreached entries are zero.
    pub fn param_grads(&self, shapes: &[Vec<usize>]) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s.clone(), vec![0.0; n]).expect("shape")
            })
            .collect();
        for &(node, idx) in &self.params {
            if let Some(g) = &self.grads[node] {
                out[idx].add_assign(g);
            }
        }
        out
    }
}

macro_rules! unary {
    ($(#[$m:meta])* $name:ident, $op:ident, $label:literal, $f:expr) => {
        $(#[$m])*
        pub fn $name(self) -> Result<Var<'t>> {
            let v = self.value().map($f);
            self.tape.push($label, v, Op::$op(self.id))
        }
    };
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.value().dims2()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn mismatch(&self, op: &'static str, other: &Var<'_>) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.shape(),
            right: other.shape(),
        }
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        if k != k2 {
            return Err(self.mismatch("matmul", &other));
        }
        let out = Tensor::from_parts_unchecked(m, n, matmul_raw(a.data(), b.data(), m, k, n));
        self.tape.push("matmul", out, Op::MatMul(self.id, other.id))
    }

    fn binary(self, other: Var<'t>, name: &'static str, op: Op, f: fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.dims2() != b.dims2() {
            return Err(self.mismatch(name, &other));
        }
        let out = a.zip(name, &b, f)?;
        self.tape.push(name, out, op)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds a `1 × c` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = (self.value(), row.value());
        let (m, c) = a.dims2();
        if r.dims2() != (1, c) {
            return Err(self.mismatch("add_row", &row));
        }
        let mut out = a.as_ref().clone();
        for i in 0..m {
            for j in 0..c {
                out.data_mut()[i * c + j] += r.data()[j];
            }
        }
        self.tape.push("add_row", out, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row elementwise by a `1 × c` row.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, r) = (self.value(), row.value());
        let (m, c) = a.dims2();
        if r.dims2() != (1, c) {
            return Err(self.mismatch("mul_row", &row));
        }
        let mut out = a.as_ref().clone();
        for i in 0..m {
            for j in 0..c {
                out.data_mut()[i * c + j] *= r.data()[j];
            }
        }
        self.tape.push("mul_row", out, Op::MulRow(self.id, row.id))
    }

    /// Scales row `i` by entry `i` of an `r × 1` column.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        let (a, cv) = (self.value(), col.value());
        let (m, c) = a.dims2();
        if cv.dims2() != (m, 1) {
            return Err(self.mismatch("mul_col", &col));
        }
        let mut out = a.as_ref().clone();
        for i in 0..m {
            for j in 0..c {
                out.data_mut()[i * c + j] *= cv.data()[i];
            }
        }
        self.tape.push("mul_col", out, Op::MulCol(self.id, col.id))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        let out = self.value().scale(s);
        self.tape.push("scale", out, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v + s);
        self.tape.push("add_scalar", out, Op::AddScalar(self.id))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::InvalidArgument {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        for (p, v) in parts.iter().zip(&values) {
            if v.rows() != rows {
                return Err(first.mismatch("concat_cols", p));
            }
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row_slice(i));
            }
        }
        let out = Tensor::from_parts_unchecked(rows, total, data);
        first
            .tape
            .push("concat_cols", out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::InvalidArgument {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = values[0].cols();
        for (p, v) in parts.iter().zip(&values) {
            if v.cols() != cols {
                return Err(first.mismatch("concat_rows", p));
            }
        }
        let rows: usize = values.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_parts_unchecked(rows, cols, data);
        first
            .tape
            .push("concat_rows", out, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (m, c) = a.dims2();
        if start + len > m {
            return Err(Error::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {m}", start + len),
            });
        }
        let out = Tensor::from_parts_unchecked(len, c, a.data()[start * c..(start + len) * c].to_vec());
        self.tape.push("slice_rows", out, Op::SliceRows(self.id, start))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (m, c) = a.dims2();
        if start + len > c {
            return Err(Error::InvalidArgument {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of {c}", start + len),
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&a.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::from_parts_unchecked(m, len, data);
        self.tape.push("slice_cols", out, Op::SliceCols(self.id, start))
    }

    /// Row `k` of the output is row `indices[k]` of the input (repeats allowed).
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let (m, c) = a.dims2();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= m {
                return Err(Error::InvalidArgument {
                    op: "gather_rows",
                    msg: format!("row {i} out of {m}"),
                });
            }
            data.extend_from_slice(a.row_slice(i));
        }
        let out = Tensor::from_parts_unchecked(indices.len(), c, data);
        self.tape
            .push("gather_rows", out, Op::GatherRows(self.id, indices.to_vec()))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = self.value().transpose();
        self.tape.push("transpose", out, Op::Transpose(self.id))
    }

    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let a = self.value();
        let (m, c) = a.dims2();
        let mut out = a.as_ref().clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.tape.push("softmax_rows", out, Op::SoftmaxRows(self.id))
    }

    pub fn log_softmax_rows(self) -> Result<Var<'t>> {
        let a = self.value();
        let (m, c) = a.dims2();
        let mut out = a.as_ref().clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.tape.push("log_softmax_rows", out, Op::LogSoftmaxRows(self.id))
    }

    unary!(tanh, Tanh, "tanh", f64::tanh);
    unary!(relu, Relu, "relu", |x| x.max(0.0));
    unary!(sigmoid, Sigmoid, "sigmoid", |x| 1.0 / (1.0 + (-x).exp()));
    unary!(exp, Exp, "exp", f64::exp);
    unary!(abs, Abs, "abs", f64::abs);

    pub fn log(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.data().iter().any(|v| *v <= 0.0) {
            return Err(Error::NonFinite { op: "log" });
        }
        let out = a.map(f64::ln);
        self.tape.push("log", out, Op::Log(self.id))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().sum();
        self.tape.push("sum", Tensor::from_parts_unchecked(1, 1, vec![s]), Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.is_empty() {
            return Err(Error::InvalidArgument {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s = a.sum() / a.len() as f64;
        self.tape.push("mean", Tensor::from_parts_unchecked(1, 1, vec![s]), Op::Mean(self.id))
    }

    /// Per-row sums as an `r × 1` column.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let a = self.value();
        let m = a.rows();
        let data = (0..m).map(|i| a.row_slice(i).iter().sum()).collect();
        self.tape
            .push("sum_rows", Tensor::from_parts_unchecked(m, 1, data), Op::SumRows(self.id))
    }

    /// Squared L2 (Frobenius) norm.
    pub fn sum_sq(self) -> Result<Var<'t>> {
        let s = self.value().data().iter().map(|v| v * v).sum();
        self.tape
            .push("sum_sq", Tensor::from_parts_unchecked(1, 1, vec![s]), Op::SumSq(self.id))
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn normalize_rows(self, eps: f64) -> Result<Var<'t>> {
        let a = self.value();
        let (m, c) = a.dims2();
        let mut out = a.as_ref().clone();
        let mut divisors = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n = norm.max(eps);
            for v in row.iter_mut() {
                *v /= n;
            }
            divisors.push((n, norm < eps));
        }
        self.tape
            .push("normalize_rows", out, Op::NormalizeRows(self.id, divisors))
    }

    /// Per-row standardization `(x − μ)/sqrt(σ² + eps)` without affine terms.
    pub fn layer_norm_rows(self, eps: f64) -> Result<Var<'t>> {
        let a = self.value();
        let (m, c) = a.dims2();
        let mut out = a.as_ref().clone();
        let mut inv = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * s;
            }
            inv.push(s);
        }
        self.tape
            .push("layer_norm_rows", out, Op::LayerNormRows(self.id, inv))
    }
}

/// Cosine similarity `uᵀv / (max(‖u‖,eps)·max(‖v‖,eps))` of two row vectors.
pub fn cosine_sim<'t>(u: Var<'t>, v: Var<'t>, eps: f64) -> Result<Var<'t>> {
    if u.dims() != v.dims() || u.dims().0 != 1 {
        return Err(u.mismatch("cosine_sim", &v));
    }
    u.normalize_rows(eps)?.mul(v.normalize_rows(eps)?)?.sum()
}

/// Row-wise cosine similarities of two equally shaped matrices, as an `r × 1` column.
pub fn cosine_rows<'t>(u: Var<'t>, v: Var<'t>, eps: f64) -> Result<Var<'t>> {
    if u.dims() != v.dims() {
        return Err(u.mismatch("cosine_rows", &v));
    }
    u.normalize_rows(eps)?.mul(v.normalize_rows(eps)?)?.sum_rows()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row<'t>(t: &'t Tape, v: &[f64]) -> Var<'t> {
        t.constant(Tensor::row(v.to_vec()).unwrap())
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let t = Tape::new();
        let s = row(&t, &[0.0, 0.0, 0.0]).softmax_rows().unwrap().value();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_along_last_axis() {
        let t = Tape::new();
        let c = Var::concat_cols(&[row(&t, &[1.0, 2.0]), row(&t, &[3.0])]).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let t = Tape::new();
        let x = t.param(0, Tensor::row(vec![1.0, 2.0, 3.0]).unwrap());
        let root = x.mul(x).unwrap().sum().unwrap();
        let g = t.backward(root).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_root_gives_zero_grads() {
        let t = Tape::new();
        let x = t.param(0, Tensor::row(vec![1.0, 2.0]).unwrap());
        let root = t.scalar(3.0).unwrap();
        let g = t.backward(root).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
        assert_eq!(g.param_grads(&[vec![1, 2]])[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let t = Tape::new();
        let x = row(&t, &[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn shape_mismatch_is_structured() {
        let t = Tape::new();
        let a = row(&t, &[1.0, 2.0]);
        let b = row(&t, &[1.0, 2.0, 3.0]);
        match a.add(b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![1, 2]);
                assert_eq!(right, vec![1, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_of_nonpositive_is_rejected() {
        let t = Tape::new();
        assert!(row(&t, &[0.0]).log().is_err());
        assert!(row(&t, &[800.0]).exp().is_err());
    }

    #[test]
    fn cosine_examples() {
        let t = Tape::new();
        let c = |u: &[f64], v: &[f64]| cosine_sim(row(&t, u), row(&t, v), 1e-8).unwrap().item();
        assert_eq!(c(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(c(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(c(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn param_used_twice_accumulates_once() {
        let t = Tape::new();
        let x = t.param(0, Tensor::row(vec![2.0]).unwrap());
        let x2 = t.param(0, Tensor::row(vec![2.0]).unwrap());
        let root = x.mul(x2).unwrap().sum().unwrap();
        let g = t.backward(root).unwrap().param_grads(&[vec![1, 1]]);
        assert_eq!(g[0].data(), &[4.0]);
    }
}
