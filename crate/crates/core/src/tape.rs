//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep. Binary
//! element-wise ops broadcast their right operand from `1×1`, `1×c` or `r×1`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{sigmoid, softplus, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Pow(Var, Var),
    SumAll(Var),
    MaxCols(Var, Vec<usize>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    L2NormalizeRows(Var, Vec<f64>),
    RowNorms(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    PickEntries(Var, Vec<(usize, usize)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Recorded computation for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar with respect to every parameter leaf that
/// influenced it, keyed by parameter id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<usize, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: usize) -> Option<&Matrix> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Matrix)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub(crate) fn insert(&mut self, id: usize, g: Matrix) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.grads.insert(id, g);
            }
        }
    }

    /// Adds `other` scaled by `factor` into `self`.
    pub fn accumulate(&mut self, other: &Gradients, factor: f64) {
        for (id, g) in other.iter() {
            self.insert(id, g.scale(factor));
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            *g = g.scale(factor);
        }
    }

    pub fn get_mut(&mut self, id: usize) -> Option<&mut Matrix> {
        self.grads.get_mut(&id)
    }
}

fn broadcast_ok(a: (usize, usize), b: (usize, usize)) -> bool {
    b == a || b == (1, 1) || b == (1, a.1) || b == (a.0, 1)
}

#[inline]
fn bget(b: &Matrix, i: usize, j: usize) -> f64 {
    let (r, c) = b.shape();
    b[(if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j })]
}

/// Sums a full-shape gradient down to the broadcast shape of `like`.
fn reduce_to(g: &Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Matrix::zeros(shape.0, shape.1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let oi = if shape.0 == 1 { 0 } else { i };
            let oj = if shape.1 == 1 { 0 } else { j };
            out[(oi, oj)] += g[(i, j)];
        }
    }
    out
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// Differentiable leaf; its gradient is reported under `id`.
    pub fn param(&mut self, id: usize, value: Matrix) -> Var {
        self.push(value, Op::Param(id))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(
            broadcast_ok(va.shape(), vb.shape()),
            "{name}: cannot broadcast {:?} onto {:?}",
            vb.shape(),
            va.shape()
        );
        let (r, c) = va.shape();
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                out[(i, j)] = f(va[(i, j)], bget(vb, i, j));
            }
        }
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b), "div")
    }

    /// `scale·a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul_unchecked(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Element-wise `a^b` for `a ≥ 0`; `b` broadcasts.
    pub fn pow(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, f64::powf, Op::Pow(a, b), "pow")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Matrix::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data().len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise maximum as an `r×1` column; ties go to the first column.
    pub fn max_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut arg = Vec::with_capacity(m.rows());
        let mut out = Matrix::zeros(m.rows(), 1);
        for i in 0..m.rows() {
            let (j, v) = m
                .row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bj, bv), (j, &v)| if v > bv { (j, v) } else { (bj, bv) });
            arg.push(j);
            out[(i, 0)] = v;
        }
        self.push(out, Op::MaxCols(a, arg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        for i in 0..m.rows() {
            let row = m.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for (o, x) in out.row_mut(i).iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Parameter-free standardisation of each row, `(x − μ)/√(σ² + eps)`.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        let mut inv = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let row = m.row(i);
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let s = 1.0 / (var + eps).sqrt();
            inv.push(s);
            for (o, x) in out.row_mut(i).iter_mut().zip(row) {
                *o = (x - mu) * s;
            }
        }
        self.push(out, Op::LayerNormRows(a, inv))
    }

    /// Scales each row to unit ℓ₂ norm; rows with norm `≤ tiny` become zero.
    pub fn l2_normalize_rows(&mut self, a: Var, tiny: f64) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let n = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            let n = if n > tiny { n } else { 0.0 };
            norms.push(n);
            for o in out.row_mut(i) {
                *o = if n > 0.0 { *o / n } else { 0.0 };
            }
        }
        self.push(out, Op::L2NormalizeRows(a, norms))
    }

    /// ℓ₂ norm of each row as an `r×1` column.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let col: Vec<f64> = (0..m.rows())
            .map(|i| m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.push(Matrix::column(&col), Op::RowNorms(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        assert!(parts.iter().all(|&p| self.value(p).rows() == rows), "concat_cols: row mismatch");
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let m = self.value(a);
        assert!(start < end && end <= m.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(m.rows(), end - start);
        for i in 0..m.rows() {
            out.row_mut(i).copy_from_slice(&m.row(i)[start..end]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(idx.len(), m.cols());
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(m.row(i));
        }
        self.push(out, Op::SelectRows(a, idx.to_vec()))
    }

    /// Gathers single entries into a `k×1` column.
    pub fn pick(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        let m = self.value(a);
        let col: Vec<f64> = idx.iter().map(|&(i, j)| m[(i, j)]).collect();
        self.push(Matrix::column(&col), Op::PickEntries(a, idx.to_vec()))
    }

    /// Reverse sweep from the scalar `output`. A tape can be swept once.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        if self.value(output).shape() != (1, 1) {
            return Err(Error::Tape(format!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::scalar(1.0));
        let mut result = Gradients::default();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |v: Var, d: Matrix| match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            let val = |v: Var| &self.nodes[v.0].value;
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => result.insert(*id, g),
                Op::Add(a, b) => {
                    send(*b, reduce_to(&g, val(*b).shape()));
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, reduce_to(&g, val(*b).shape()).scale(-1.0));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let mut ga = g.clone();
                    let mut gb_full = g.clone();
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            ga[(i, j)] *= bget(vb, i, j);
                            gb_full[(i, j)] *= va[(i, j)];
                        }
                    }
                    send(*b, reduce_to(&gb_full, vb.shape()));
                    send(*a, ga);
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let mut ga = g.clone();
                    let mut gb_full = g.clone();
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            let d = bget(vb, i, j);
                            ga[(i, j)] /= d;
                            gb_full[(i, j)] *= -va[(i, j)] / (d * d);
                        }
                    }
                    send(*b, reduce_to(&gb_full, vb.shape()));
                    send(*a, ga);
                }
                Op::Affine(a, s) => send(*a, g.scale(*s)),
                Op::MatMul(a, b) => {
                    let ga = g.mul_t(val(*b));
                    let gb = val(*a).tmul(&g);
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.mul_unchecked(val(*b));
                    let gb = g.tmul(val(*a));
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Sigmoid(a) => send(*a, g.zip_map(y, |gv, s| gv * s * (1.0 - s))),
                Op::Tanh(a) => send(*a, g.zip_map(y, |gv, t| gv * (1.0 - t * t))),
                Op::Exp(a) => send(*a, g.zip_map(y, |gv, e| gv * e)),
                Op::Ln(a) => send(*a, g.zip_map(val(*a), |gv, x| gv / x)),
                Op::Softplus(a) => send(*a, g.zip_map(val(*a), |gv, x| gv * sigmoid(x))),
                Op::Abs(a) => send(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else if x < 0.0 { -gv } else { 0.0 })),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    send(*a, g.zip_map(val(*a), |gv, x| if x < lo || x > hi { 0.0 } else { gv }))
                }
                Op::Pow(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let mut ga = g.clone();
                    let mut gb_full = g.clone();
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            let (x, e) = (va[(i, j)], bget(vb, i, j));
                            if x > 0.0 {
                                ga[(i, j)] *= e * x.powf(e - 1.0);
                                gb_full[(i, j)] *= y[(i, j)] * x.ln();
                            } else {
                                ga[(i, j)] = 0.0;
                                gb_full[(i, j)] = 0.0;
                            }
                        }
                    }
                    send(*b, reduce_to(&gb_full, vb.shape()));
                    send(*a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, Matrix::filled(r, c, g[(0, 0)]));
                }
                Op::MaxCols(a, arg) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (i, &j) in arg.iter().enumerate() {
                        ga[(i, j)] = g[(i, 0)];
                    }
                    send(*a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for i in 0..g.rows() {
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(p, q)| p * q).sum();
                        for (o, &s) in ga.row_mut(i).iter_mut().zip(y.row(i)) {
                            *o = s * (*o - dot);
                        }
                    }
                    send(*a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for i in 0..g.rows() {
                        let total: f64 = g.row(i).iter().sum();
                        for (o, &ls) in ga.row_mut(i).iter_mut().zip(y.row(i)) {
                            *o -= ls.exp() * total;
                        }
                    }
                    send(*a, ga);
                }
                Op::LayerNormRows(a, inv) => {
                    let mut ga = g.clone();
                    for (i, &s) in inv.iter().enumerate() {
                        let n = g.cols() as f64;
                        let (gr, yr) = (g.row(i), y.row(i));
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                        for ((o, &gv), &yv) in ga.row_mut(i).iter_mut().zip(gr).zip(yr) {
                            *o = s * (gv - mg - yv * mgy);
                        }
                    }
                    send(*a, ga);
                }
                Op::L2NormalizeRows(a, norms) => {
                    let mut ga = g.clone();
                    for (i, &n) in norms.iter().enumerate() {
                        let (gr, yr) = (g.row(i), y.row(i));
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((o, &gv), &yv) in ga.row_mut(i).iter_mut().zip(gr).zip(yr) {
                            *o = if n > 0.0 { (gv - yv * dot) / n } else { 0.0 };
                        }
                    }
                    send(*a, ga);
                }
                Op::RowNorms(a) => {
                    let va = val(*a);
                    let mut ga = va.clone();
                    for i in 0..va.rows() {
                        let n = y[(i, 0)];
                        let s = if n > 0.0 { g[(i, 0)] / n } else { 0.0 };
                        for o in ga.row_mut(i) {
                            *o *= s;
                        }
                    }
                    send(*a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = val(p).cols();
                        let mut gp = Matrix::zeros(g.rows(), c);
                        for i in 0..g.rows() {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        off += c;
                        send(p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    send(*a, ga);
                }
                Op::SelectRows(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    send(*a, ga);
                }
                Op::PickEntries(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (k, &(i, j)) in idx.iter().enumerate() {
                        ga[(i, j)] += g[(k, 0)];
                    }
                    send(*a, ga);
                }
            }
        }
        Ok(result)
    }
}

pub(crate) fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm_gradient() {
        let mut t = Tape::new();
        let x = t.param(0, Matrix::row_vector(&[1.0, 2.0]));
        let sq = t.mul(x, x);
        let loss = t.sum(sq);
        assert_eq!(t.scalar(loss), 5.0);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_get_no_entry() {
        let mut t = Tape::new();
        let w = t.constant(Matrix::identity(2));
        let x = t.param(3, Matrix::column(&[1.0, -1.0]));
        let y = t.matmul(w, x);
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.get(3).is_some());
    }

    #[test]
    fn second_backward_fails() {
        let mut t = Tape::new();
        let x = t.param(0, Matrix::scalar(2.0));
        let y = t.mul(x, x);
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Tape(_))));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut t = Tape::new();
        let x = t.param(0, Matrix::row_vector(&[1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = (x + x)·x = 2x², f' = 4x.
        let mut t = Tape::new();
        let x = t.param(0, Matrix::scalar(3.0));
        let s = t.add(x, x);
        let f = t.mul(s, x);
        let g = t.backward(f).unwrap();
        assert_eq!(g.get(0).unwrap()[(0, 0)], 12.0);
    }
}
