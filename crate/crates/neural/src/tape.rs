//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward evaluation as a node
//! holding its output value. [`Tape::backward`] then walks the nodes in
//! reverse order and accumulates adjoints. Binary elementwise operations
//! broadcast rank-2 operands whose dimensions are either equal or 1.

use crate::tensor::{matmul_at_into, matmul_bt_into};
use crate::{NeuralError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Atan2(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Axpy(Var, f64, Var),
    Offset(Var),
    MatMul(Var, Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    SmoothAbs(Var, f64),
    Cols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SumCols(Var),
    SumRows(Var),
    SumAll(Var),
    MaxCols(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph for one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn broadcast_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize), NeuralError> {
    let (ar, ac, br, bc) = (a.rows(), a.cols(), b.rows(), b.cols());
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(ar, br), dim(ac, bc)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(NeuralError::ShapeMismatch {
            op,
            expected: vec![ar, ac],
            got: vec![br, bc],
        }),
    }
}

#[inline]
fn at(t: &Tensor, i: usize, j: usize) -> f64 {
    let (r, c) = (t.rows(), t.cols());
    let ii = if r == 1 { 0 } else { i };
    let jj = if c == 1 { 0 } else { j };
    t.data()[ii * c + jj]
}

fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, NeuralError> {
    let (r, c) = broadcast_dims(op, a, b)?;
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(r, c, data));
    }
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(f(at(a, i, j), at(b, i, j)));
        }
    }
    Ok(Tensor::from_parts(r, c, data))
}

/// Sums a full-size gradient down to the (possibly broadcast) operand shape.
fn reduce_to(g: Tensor, rows: usize, cols: usize) -> Tensor {
    if g.rows() == rows && g.cols() == cols {
        return g;
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let ii = if rows == 1 { 0 } else { i };
            let jj = if cols == 1 { 0 } else { j };
            out[ii * cols + jj] += g.get(i, j);
        }
    }
    Tensor::from_parts(rows, cols, out)
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf whose gradient is tracked (parameters, differentiable inputs).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NeuralError> {
        let value = zip_broadcast(name, self.value(a), self.value(b), f)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, op, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var, NeuralError> {
        self.binary("atan2", y, x, f64::atan2, Op::Atan2(y, x))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    /// `a + k·b` for a constant `k`.
    pub fn axpy(&mut self, a: Var, k: f64, b: Var) -> Result<Var, NeuralError> {
        self.binary("axpy", a, b, |x, y| x + k * y, Op::Axpy(a, k, b))
    }

    /// `a + k` for a constant `k`.
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::Offset(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NeuralError> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `sqrt(x² + eps²) − eps`, a differentiable surrogate for `|x|`.
    pub fn smooth_abs(&mut self, a: Var, eps: f64) -> Var {
        self.unary(a, |x| smooth_abs(x, eps), Op::SmoothAbs(a, eps))
    }

    /// Gathers the listed columns into a new `[rows, idx.len()]` tensor.
    pub fn cols(&mut self, a: Var, idx: &[usize]) -> Result<Var, NeuralError> {
        let src = self.value(a);
        let (r, c) = (src.rows(), src.cols());
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(NeuralError::ShapeMismatch {
                op: "cols",
                expected: vec![r, c],
                got: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = src.row_slice(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        let value = Tensor::from_parts(r, idx.len(), data);
        let ng = self.needs(a);
        Ok(self.push(value, Op::Cols(a, idx.to_vec()), ng))
    }

    pub fn col(&mut self, a: Var, j: usize) -> Result<Var, NeuralError> {
        self.cols(a, &[j])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NeuralError> {
        let r = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != r {
                return Err(NeuralError::ShapeMismatch {
                    op: "concat_cols",
                    expected: vec![r],
                    got: vec![v.rows()],
                });
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_parts(r, total, data), Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Row sums: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = (0..src.rows()).map(|i| src.row_slice(i).iter().sum()).collect();
        let value = Tensor::from_parts(src.rows(), 1, data);
        let ng = self.needs(a);
        self.push(value, Op::SumCols(a), ng)
    }

    /// Column sums: `[r, c] -> [1, c]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let c = src.cols();
        let mut data = vec![0.0; c];
        for i in 0..src.rows() {
            for (d, v) in data.iter_mut().zip(src.row_slice(i)) {
                *d += v;
            }
        }
        let ng = self.needs(a);
        self.push(Tensor::from_parts(1, c, data), Op::SumRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise maximum over columns: `[r, c] -> [r, 1]`.
    /// The adjoint flows to the first maximising column.
    pub fn max_cols(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut arg = Vec::with_capacity(src.rows());
        let mut data = Vec::with_capacity(src.rows());
        for i in 0..src.rows() {
            let row = src.row_slice(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            data.push(row[best]);
        }
        let value = Tensor::from_parts(src.rows(), 1, data);
        let ng = self.needs(a);
        self.push(value, Op::MaxCols(a, arg), ng)
    }

    /// Gradient of `v` after [`Tape::backward`]; `None` if no adjoint reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Reverse sweep seeded with ones; `output` must hold a single value.
    pub fn backward(&mut self, output: Var) -> Result<(), NeuralError> {
        let out = self.nodes.get(output.0).ok_or(NeuralError::TapeIncomplete)?;
        if out.value.len() != 1 {
            return Err(NeuralError::ShapeMismatch {
                op: "backward",
                expected: vec![1, 1],
                got: out.value.shape().to_vec(),
            });
        }
        let seed = Tensor::from_parts(out.value.rows(), out.value.cols(), vec![1.0]);
        self.backward_with(output, seed)
    }

    /// Reverse sweep seeded with an explicit output adjoint.
    pub fn backward_with(&mut self, output: Var, seed: Tensor) -> Result<(), NeuralError> {
        let out = self.nodes.get(output.0).ok_or(NeuralError::TapeIncomplete)?;
        if out.value.rows() != seed.rows() || out.value.cols() != seed.cols() {
            return Err(NeuralError::ShapeMismatch {
                op: "backward_with",
                expected: out.value.shape().to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let (r, c) = {
            let t = &self.nodes[v.0].value;
            (t.rows(), t.cols())
        };
        let g = reduce_to(g, r, c);
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let op = self.nodes[i].op.clone();
        let out_rc = (g.rows(), g.cols());
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(a, g.clone());
                self.accum(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(a, g.clone());
                self.accum(b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let t = zip_broadcast("mul", g, self.value(b), |x, y| x * y).unwrap();
                    self.accum(a, t);
                }
                if self.needs(b) {
                    let t = zip_broadcast("mul", g, self.value(a), |x, y| x * y).unwrap();
                    self.accum(b, t);
                }
            }
            Op::Div(a, b) => {
                if self.needs(a) {
                    let t = zip_broadcast("div", g, self.value(b), |x, y| x / y).unwrap();
                    self.accum(a, t);
                }
                if self.needs(b) {
                    // d(a/b)/db = -out/b
                    let out = &self.nodes[i].value;
                    let t = zip_broadcast("div", out, self.value(b), |o, y| -o / y).unwrap();
                    let t = zip_broadcast("div", g, &t, |x, y| x * y).unwrap();
                    self.accum(b, t);
                }
            }
            Op::Atan2(y, x) => {
                let (r, c) = out_rc;
                let (yv, xv) = (self.value(y), self.value(x));
                let mut gy = Vec::with_capacity(r * c);
                let mut gx = Vec::with_capacity(r * c);
                for ii in 0..r {
                    for jj in 0..c {
                        let (yy, xx) = (at(yv, ii, jj), at(xv, ii, jj));
                        let den = xx * xx + yy * yy;
                        let gg = g.get(ii, jj);
                        gy.push(gg * xx / den);
                        gx.push(-gg * yy / den);
                    }
                }
                self.accum(y, Tensor::from_parts(r, c, gy));
                self.accum(x, Tensor::from_parts(r, c, gx));
            }
            Op::Neg(a) => self.accum(a, g.map(|x| -x)),
            Op::Scale(a, k) => self.accum(a, g.map(|x| k * x)),
            Op::Offset(a) => self.accum(a, g.clone()),
            Op::Axpy(a, k, b) => {
                self.accum(a, g.clone());
                if self.needs(b) {
                    self.accum(b, g.map(|x| k * x));
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.value(b).cols();
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_into(g.data(), self.value(b).data(), &mut da, m, n, k);
                    self.accum(a, Tensor::from_parts(m, k, da));
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_into(self.value(a).data(), g.data(), &mut db, m, k, n);
                    self.accum(b, Tensor::from_parts(k, n, db));
                }
            }
            Op::Tanh(a) => {
                let t = self.elementwise_from_out(i, g, |_, y| 1.0 - y * y);
                self.accum(a, t);
            }
            Op::Sigmoid(a) => {
                let t = self.elementwise_from_out(i, g, |_, y| y * (1.0 - y));
                self.accum(a, t);
            }
            Op::Exp(a) => {
                let t = self.elementwise_from_out(i, g, |_, y| y);
                self.accum(a, t);
            }
            Op::Sqrt(a) => {
                let t = self.elementwise_from_out(i, g, |_, y| 0.5 / y);
                self.accum(a, t);
            }
            Op::Relu(a) => {
                let t = self.elementwise_from_in(a, g, |x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accum(a, t);
            }
            Op::Sin(a) => {
                let t = self.elementwise_from_in(a, g, f64::cos);
                self.accum(a, t);
            }
            Op::Cos(a) => {
                let t = self.elementwise_from_in(a, g, |x| -x.sin());
                self.accum(a, t);
            }
            Op::Square(a) => {
                let t = self.elementwise_from_in(a, g, |x| 2.0 * x);
                self.accum(a, t);
            }
            Op::SmoothAbs(a, eps) => {
                let t = self.elementwise_from_in(a, g, |x| x / (x * x + eps * eps).sqrt());
                self.accum(a, t);
            }
            Op::Cols(a, idx) => {
                if self.needs(a) {
                    let (r, c) = (self.value(a).rows(), self.value(a).cols());
                    let mut t = vec![0.0; r * c];
                    for ii in 0..r {
                        for (k, &j) in idx.iter().enumerate() {
                            t[ii * c + j] += g.get(ii, k);
                        }
                    }
                    self.accum(a, Tensor::from_parts(r, c, t));
                }
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let mut t = Vec::with_capacity(r * c);
                        for ii in 0..r {
                            t.extend_from_slice(&g.row_slice(ii)[offset..offset + c]);
                        }
                        self.accum(p, Tensor::from_parts(r, c, t));
                    }
                    offset += c;
                }
            }
            Op::SumCols(a) => {
                let (r, c) = (self.value(a).rows(), self.value(a).cols());
                let mut t = Vec::with_capacity(r * c);
                for ii in 0..r {
                    t.extend(std::iter::repeat_n(g.get(ii, 0), c));
                }
                self.accum(a, Tensor::from_parts(r, c, t));
            }
            Op::SumRows(a) => {
                let (r, c) = (self.value(a).rows(), self.value(a).cols());
                let mut t = Vec::with_capacity(r * c);
                for _ in 0..r {
                    t.extend_from_slice(g.data());
                }
                self.accum(a, Tensor::from_parts(r, c, t));
            }
            Op::SumAll(a) => {
                let (r, c) = (self.value(a).rows(), self.value(a).cols());
                self.accum(a, Tensor::full(r, c, g.item()));
            }
            Op::MaxCols(a, arg) => {
                let (r, c) = (self.value(a).rows(), self.value(a).cols());
                let mut t = vec![0.0; r * c];
                for (ii, &j) in arg.iter().enumerate() {
                    t[ii * c + j] = g.get(ii, 0);
                }
                self.accum(a, Tensor::from_parts(r, c, t));
            }
        }
    }

    fn elementwise_from_out(&self, i: usize, g: &Tensor, d: impl Fn(f64, f64) -> f64) -> Tensor {
        let out = &self.nodes[i].value;
        let data = g
            .data()
            .iter()
            .zip(out.data())
            .map(|(&gg, &y)| gg * d(0.0, y))
            .collect();
        Tensor::from_parts(g.rows(), g.cols(), data)
    }

    fn elementwise_from_in(&self, a: Var, g: &Tensor, d: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        let data = g
            .data()
            .iter()
            .zip(x.data())
            .map(|(&gg, &xx)| gg * d(xx))
            .collect();
        Tensor::from_parts(g.rows(), g.cols(), data)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn smooth_abs(x: f64, eps: f64) -> f64 {
    (x * x + eps * eps).sqrt() - eps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_product_gradient() {
        // f(w) = w·x with x = 3
        let mut t = Tape::new();
        let w = t.variable(Tensor::scalar(2.0));
        let x = t.constant(Tensor::scalar(3.0));
        let y = t.mul(w, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(w).unwrap().item(), 3.0);
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn broadcast_row_gradient_is_summed() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::full(3, 2, 1.0));
        let b = t.variable(Tensor::row(&[0.5, -0.5]));
        let s = t.add(a, b).unwrap();
        let l = t.sum_all(s);
        t.backward(l).unwrap();
        assert_eq!(t.grad(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn relu_kink_takes_zero_subgradient() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::row(&[0.0, 1.0, -1.0]));
        let y = t.relu(x);
        let l = t.sum_all(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn max_cols_routes_to_first_argmax() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::matrix(2, 3, vec![1.0, 5.0, 5.0, -1.0, -3.0, -2.0]).unwrap());
        let m = t.max_cols(x);
        assert_eq!(t.value(m).data(), &[5.0, -1.0]);
        let l = t.sum_all(m);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_output_and_bad_seed() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::row(&[1.0, 2.0]));
        assert!(t.backward(x).is_err());
        assert!(t.backward_with(x, Tensor::scalar(1.0)).is_err());
        assert!(t.backward_with(Var(99), Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn shape_errors_surface() {
        let mut t = Tape::new();
        let a = t.variable(Tensor::zeros(2, 3));
        let b = t.variable(Tensor::zeros(3, 2));
        assert!(t.add(a, b).is_err());
        assert!(t.matmul(a, a).is_err());
        assert!(t.cols(a, &[3]).is_err());
    }
}
