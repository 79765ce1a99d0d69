//! Reverse-mode differentiation over dense matrices.
//!
//! A [`GradTape`] records every primitive applied to its variables together
//! with the computed value. [`GradTape::backward`] walks the records in
//! reverse and accumulates adjoints; only registered parameters keep their
//! gradients.
//!
//! The primitive set is deliberately small: everything the propagation model
//! needs is composed from the ops below. `solve` is differentiated with the
//! implicit-function rule, so `(I - αS)⁻¹` never has to be formed explicitly.

use crate::error::{Error, Result};
use crate::matrix::{Lu, Matrix};

/// Handle to a node on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var, f64),
    /// `a * s` with `s` a 1x1 node.
    ScaleBy(Var, Var),
    /// `a + s` with `s` a 1x1 node.
    ShiftBy(Var, Var),
    /// `a + 1·row` with `row` a 1xc node.
    AddRow(Var, Var),
    /// `a[i, j] * col[i]` with `col` an nx1 node.
    MulCol(Var, Var),
    Square(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Powf(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ColSum(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    GatherRows(Var, Vec<usize>),
    Reshape(Var, usize, usize),
    Solve(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::ScaleBy(..) => "scale_by",
            Op::ShiftBy(..) => "shift_by",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Square(_) => "square",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Abs(_) => "abs",
            Op::Powf(..) => "powf",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::ColSum(_) => "col_sum",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::Solve(..) => "solve",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    // Factorization kept from the forward solve for the backward rule.
    lu: Option<Lu>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Gradients of a scalar loss with respect to every registered parameter,
/// in registration order.
#[derive(Debug, Clone)]
pub struct Gradients {
    names: Vec<String>,
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.grads[i])
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.grads)
    }

    pub fn into_matrices(self) -> Vec<Matrix> {
        self.grads
    }
}

#[derive(Debug, Default, Clone)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf. It takes part in the forward pass but never receives
    /// a gradient.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            value,
            lu: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf whose gradient is reported by [`backward`](Self::backward).
    pub fn param(&mut self, name: impl Into<String>, value: Matrix) -> Var {
        let k = self.params.len();
        self.nodes.push(Node {
            op: Op::Param(k),
            value,
            lu: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.into(), v));
        v
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = &self.nodes[v.0].value;
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    /// Replaces the value of a leaf. Call [`replay`](Self::replay) afterwards
    /// to refresh dependent nodes.
    pub fn set_leaf(&mut self, v: Var, value: Matrix) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Input | Op::Param(_)) {
            return Err(Error::invalid("set_leaf on a non-leaf node"));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::invalid("set_leaf shape change"));
        }
        node.value = value;
        Ok(())
    }

    /// Recomputes every recorded node from the current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input | Op::Param(_)) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (value, lu) = self.eval(&op)?;
            self.nodes[i].value = value;
            self.nodes[i].lu = lu;
        }
        Ok(())
    }

    fn check(&self, v: Var) -> Result<&Matrix> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::invalid(format!("unknown tape variable {}", v.0)))
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let (value, lu) = self.eval(&op)?;
        if !value.is_finite() {
            return Err(Error::NumericInstability(format!(
                "non-finite output from `{}`",
                op.name()
            )));
        }
        self.nodes.push(Node { op, value, lu });
        Ok(Var(self.nodes.len() - 1))
    }

    fn eval(&self, op: &Op) -> Result<(Matrix, Option<Lu>)> {
        let v = match op {
            Op::Input | Op::Param(_) => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => self.check(*a)?.matmul(self.check(*b)?)?,
            Op::Transpose(a) => self.check(*a)?.transpose(),
            Op::Add(a, b) => self.check(*a)?.add(self.check(*b)?)?,
            Op::Sub(a, b) => self.check(*a)?.sub(self.check(*b)?)?,
            Op::Mul(a, b) => self.check(*a)?.hadamard(self.check(*b)?)?,
            Op::Scale(a, s) => self.check(*a)?.scale(*s),
            Op::Shift(a, s) => self.check(*a)?.map(|x| x + s),
            Op::ScaleBy(a, s) => {
                let s = scalar_of(self.check(*s)?, "scale_by")?;
                self.check(*a)?.scale(s)
            }
            Op::ShiftBy(a, s) => {
                let s = scalar_of(self.check(*s)?, "shift_by")?;
                self.check(*a)?.map(|x| x + s)
            }
            Op::AddRow(a, row) => {
                let (a, row) = (self.check(*a)?, self.check(*row)?);
                if row.rows() != 1 || row.cols() != a.cols() {
                    return Err(Error::invalid(format!(
                        "add_row: {:?} + row {:?}",
                        a.shape(),
                        row.shape()
                    )));
                }
                Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + row.get(0, j))
            }
            Op::MulCol(a, col) => {
                let (a, col) = (self.check(*a)?, self.check(*col)?);
                if col.cols() != 1 || col.rows() != a.rows() {
                    return Err(Error::invalid(format!(
                        "mul_col: {:?} * col {:?}",
                        a.shape(),
                        col.shape()
                    )));
                }
                Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * col.get(i, 0))
            }
            Op::Square(a) => self.check(*a)?.map(|x| x * x),
            Op::Exp(a) => self.check(*a)?.map(f64::exp),
            Op::Log(a) => self.check(*a)?.map(f64::ln),
            Op::Sqrt(a) => self.check(*a)?.map(|x| x.max(0.0).sqrt()),
            Op::Abs(a) => self.check(*a)?.map(f64::abs),
            Op::Powf(a, p) => self.check(*a)?.map(|x| x.powf(*p)),
            Op::Sigmoid(a) => self.check(*a)?.map(sigmoid),
            Op::Softplus(a) => self.check(*a)?.map(softplus),
            Op::ClampMin(a, lo) => self.check(*a)?.map(|x| x.max(*lo)),
            Op::Sum(a) => Matrix::scalar(self.check(*a)?.sum()),
            Op::Mean(a) => {
                let a = self.check(*a)?;
                if a.is_empty() {
                    return Err(Error::invalid("mean of empty matrix"));
                }
                Matrix::scalar(a.sum() / a.data().len() as f64)
            }
            Op::RowSum(a) => {
                let a = self.check(*a)?;
                Matrix::from_fn(a.rows(), 1, |i, _| a.row(i).iter().sum())
            }
            Op::ColSum(a) => {
                let a = self.check(*a)?;
                Matrix::from_fn(1, a.cols(), |_, j| (0..a.rows()).map(|i| a.get(i, j)).sum())
            }
            Op::ConcatCols(a, b) => {
                let (a, b) = (self.check(*a)?, self.check(*b)?);
                if a.rows() != b.rows() {
                    return Err(Error::invalid("concat_cols row mismatch"));
                }
                let ac = a.cols();
                Matrix::from_fn(a.rows(), ac + b.cols(), |i, j| {
                    if j < ac {
                        a.get(i, j)
                    } else {
                        b.get(i, j - ac)
                    }
                })
            }
            Op::ConcatRows(a, b) => self.check(*a)?.vstack(self.check(*b)?)?,
            Op::GatherRows(a, idx) => self.check(*a)?.select_rows(idx)?,
            Op::Reshape(a, r, c) => {
                let a = self.check(*a)?;
                if r * c != a.data().len() {
                    return Err(Error::invalid(format!(
                        "reshape {:?} to {r}x{c}",
                        a.shape()
                    )));
                }
                Matrix::from_vec_unchecked(*r, *c, a.data().to_vec())
            }
            Op::Solve(m, b) => {
                let lu = Lu::factor(self.check(*m)?)?;
                let x = lu.solve(self.check(*b)?)?;
                return Ok((x, Some(lu)));
            }
        };
        Ok((v, None))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }
    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }
    pub fn shift(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Shift(a, s))
    }
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.push(Op::ScaleBy(a, s))
    }
    pub fn shift_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.push(Op::ShiftBy(a, s))
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.push(Op::MulCol(a, col))
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }
    /// Square root; the derivative at zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sqrt(a))
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Abs(a))
    }
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.push(Op::Powf(a, p))
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softplus(a))
    }
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        self.push(Op::ClampMin(a, lo))
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowSum(a))
    }
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::ColSum(a))
    }
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::ConcatCols(a, b))
    }
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::ConcatRows(a, b))
    }
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows(a, idx))
    }
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        self.push(Op::Reshape(a, rows, cols))
    }
    /// `X = M⁻¹B` via LU with partial pivoting.
    pub fn solve(&mut self, m: Var, b: Var) -> Result<Var> {
        self.push(Op::Solve(m, b))
    }

    /// Backpropagates from a 1x1 `loss`. Every registered parameter gets a
    /// gradient; parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.check(loss)?;
        if loss_value.shape() != (1, 1) {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got {:?}",
                loss_value.shape()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));
        let mut param_grads: Vec<Matrix> = self
            .params
            .iter()
            .map(|(_, v)| {
                let (r, c) = self.nodes[v.0].value.shape();
                Matrix::zeros(r, c)
            })
            .collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: &Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Input => {}
                Op::Param(k) => param_grads[*k].add_assign(&g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&val(b).transpose())?;
                    let gb = val(a).transpose().matmul(&g)?;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.transpose()),
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *b, g.scale(-1.0));
                    acc(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(val(b))?;
                    let gb = g.hadamard(val(a))?;
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut adj, *a, g.scale(*s)),
                Op::Shift(a, _) => acc(&mut adj, *a, g),
                Op::ScaleBy(a, s) => {
                    let sv = val(s).get(0, 0);
                    let gs = g.hadamard(val(a))?.sum();
                    acc(&mut adj, *a, g.scale(sv));
                    acc(&mut adj, *s, Matrix::scalar(gs));
                }
                Op::ShiftBy(a, s) => {
                    acc(&mut adj, *s, Matrix::scalar(g.sum()));
                    acc(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    let grow = Matrix::from_fn(1, g.cols(), |_, j| {
                        (0..g.rows()).map(|r| g.get(r, j)).sum()
                    });
                    acc(&mut adj, *row, grow);
                    acc(&mut adj, *a, g);
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (val(a), val(col));
                    let ga = Matrix::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * cv.get(r, 0));
                    let gcol = Matrix::from_fn(g.rows(), 1, |r, _| {
                        g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum()
                    });
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *col, gcol);
                }
                Op::Square(a) => {
                    let ga = g.zip_map(val(a), |g, x| 2.0 * x * g)?;
                    acc(&mut adj, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.hadamard(&node.value)?;
                    acc(&mut adj, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_map(val(a), |g, x| g / x)?;
                    acc(&mut adj, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = g.zip_map(&node.value, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 })?;
                    acc(&mut adj, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = g.zip_map(val(a), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })?;
                    acc(&mut adj, *a, ga);
                }
                Op::Powf(a, p) => {
                    let p = *p;
                    let ga = g.zip_map(val(a), |g, x| g * p * x.powf(p - 1.0))?;
                    acc(&mut adj, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |g, y| g * y * (1.0 - y))?;
                    acc(&mut adj, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = g.zip_map(val(a), |g, x| g * sigmoid(x))?;
                    acc(&mut adj, *a, ga);
                }
                Op::ClampMin(a, lo) => {
                    let lo = *lo;
                    let ga = g.zip_map(val(a), |g, x| if x > lo { g } else { 0.0 })?;
                    acc(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = val(a).shape();
                    acc(&mut adj, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::Mean(a) => {
                    let (r, c) = val(a).shape();
                    let n = (r * c) as f64;
                    acc(&mut adj, *a, Matrix::filled(r, c, g.get(0, 0) / n));
                }
                Op::RowSum(a) => {
                    let (r, c) = val(a).shape();
                    acc(&mut adj, *a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)));
                }
                Op::ColSum(a) => {
                    let (r, c) = val(a).shape();
                    acc(&mut adj, *a, Matrix::from_fn(r, c, |_, j| g.get(0, j)));
                }
                Op::ConcatCols(a, b) => {
                    let ac = val(a).cols();
                    let bc = val(b).cols();
                    let ga = Matrix::from_fn(g.rows(), ac, |i, j| g.get(i, j));
                    let gb = Matrix::from_fn(g.rows(), bc, |i, j| g.get(i, ac + j));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::ConcatRows(a, b) => {
                    let ar = val(a).rows();
                    let (br, c) = val(b).shape();
                    let ga = Matrix::from_fn(ar, c, |i, j| g.get(i, j));
                    let gb = Matrix::from_fn(br, c, |i, j| g.get(ar + i, j));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = val(a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for (k, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            let cur = ga.get(src, j);
                            ga.set(src, j, cur + g.get(k, j));
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Reshape(a, _, _) => {
                    let (r, c) = val(a).shape();
                    acc(&mut adj, *a, Matrix::from_vec_unchecked(r, c, g.into_data()));
                }
                Op::Solve(m, b) => {
                    let lu = node.lu.as_ref().expect("solve node keeps its factorization");
                    let gb = lu.solve_transpose(&g)?;
                    let gm = gb.matmul(&node.value.transpose())?.scale(-1.0);
                    acc(&mut adj, *m, gm);
                    acc(&mut adj, *b, gb);
                }
            }
        }

        Ok(Gradients {
            names: self.params.iter().map(|(n, _)| n.clone()).collect(),
            grads: param_grads,
        })
    }
}

fn scalar_of(m: &Matrix, op: &str) -> Result<f64> {
    if m.shape() != (1, 1) {
        return Err(Error::invalid(format!(
            "{op}: expected a 1x1 scalar, got {:?}",
            m.shape()
        )));
    }
    Ok(m.get(0, 0))
}

fn acc(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_map_gradient_is_outer_product() {
        let mut t = GradTape::new();
        let w = t.param("w", m(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]));
        let x = t.input(m(&[vec![0.5], vec![-2.0], vec![4.0]]));
        let y = t.matmul(w, x).unwrap();
        let loss = t.sum(y).unwrap();
        let g = t.backward(loss).unwrap();
        let want = m(&[vec![0.5, -2.0, 4.0], vec![0.5, -2.0, 4.0]]);
        assert_eq!(g.get("w").unwrap(), &want);
    }

    #[test]
    fn squared_norm_gradient_is_twice_w() {
        let wv = m(&[vec![1.5, -2.0], vec![0.25, 3.0]]);
        let mut t = GradTape::new();
        let w = t.param("w", wv.clone());
        let sq = t.square(w).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap(), &wv.scale(2.0));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut t = GradTape::new();
        let a = t.param("a", m(&[vec![1.0, 2.0]]));
        let _b = t.param("b", m(&[vec![3.0], vec![4.0], vec![5.0]]));
        let loss = t.sum(a).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get("b").unwrap(), &Matrix::zeros(3, 1));
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = GradTape::new();
        let a = t.param("a", m(&[vec![1.0, 2.0]]));
        assert!(matches!(t.backward(a), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn shape_errors_surface_as_invalid_input() {
        let mut t = GradTape::new();
        let a = t.input(Matrix::zeros(2, 3));
        let b = t.input(Matrix::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(Error::InvalidInput(_))));
        assert!(matches!(t.add_row(a, b), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn overflow_is_reported() {
        let mut t = GradTape::new();
        let a = t.input(Matrix::scalar(1000.0));
        assert!(matches!(t.exp(a), Err(Error::NumericInstability(_))));
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut t = GradTape::new();
        let a = t.param("a", m(&[vec![0.3, -1.2], vec![2.0, 0.7]]));
        let b = t.input(m(&[vec![1.0], vec![0.5]]));
        let i = t.input(Matrix::identity(2));
        let sa = t.scale(a, 0.2).unwrap();
        let mm = t.sub(i, sa).unwrap();
        let x = t.solve(mm, b).unwrap();
        let s = t.softplus(x).unwrap();
        let loss = t.sum(s).unwrap();
        let before: Vec<Matrix> = (0..t.len()).map(|k| t.value(Var(k)).clone()).collect();
        t.replay().unwrap();
        for (k, old) in before.iter().enumerate() {
            assert_eq!(t.value(Var(k)).data(), old.data(), "node {k}");
        }
        let before_loss = t.scalar(loss);
        t.set_leaf(b, m(&[vec![2.0], vec![-1.0]])).unwrap();
        t.replay().unwrap();
        assert_ne!(t.scalar(loss), before_loss);
    }

    #[test]
    fn stable_activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }
}
