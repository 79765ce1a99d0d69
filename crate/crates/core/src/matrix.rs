//! Dense row-major `f64` matrices and an LU solver.
//!
//! Everything in the crate is small (graphs of at most a few dozen nodes), so
//! the routines here are plain loops with no blocking or SIMD.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pivot ratio above which a system is treated as ill-conditioned.
pub const MAX_PIVOT_RATIO: f64 = 1e12;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec_unchecked(1, 1, vec![value])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds from nested rows. All rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest entrywise absolute difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows)
                .all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "elementwise shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub(crate) fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "matmul shape mismatch {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_vec_unchecked(n, m, out))
    }

    /// Rows selected by index, in the given order (repeats allowed).
    pub fn select_rows(&self, idx: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::invalid(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix::from_vec_unchecked(idx.len(), self.cols, data))
    }

    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::invalid("vstack column mismatch"));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix::from_vec_unchecked(self.rows + other.rows, self.cols, data))
    }
}

/// Squared Euclidean distances between all pairs of rows of `z`.
pub fn pairwise_sq_distances(z: &Matrix) -> Result<Matrix> {
    let (n, c) = z.shape();
    if n == 0 || c == 0 {
        return Err(Error::invalid("pairwise distances of an empty matrix"));
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = z
                .row(i)
                .iter()
                .zip(z.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    Ok(out)
}

/// LU factorization with partial pivoting, `P·M = L·U`.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    // L below the diagonal (unit diagonal implied), U on and above.
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(m: &Matrix) -> Result<Self> {
        let (n, cols) = m.shape();
        if n != cols {
            return Err(Error::invalid(format!("LU of non-square {n}x{cols} matrix")));
        }
        if n == 0 {
            return Err(Error::invalid("LU of empty matrix"));
        }
        let mut lu = m.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut max_pivot = 0.0f64;
        let mut min_pivot = f64::INFINITY;
        for k in 0..n {
            let (p, pivot_abs) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot_abs == 0.0 || !pivot_abs.is_finite() {
                return Err(Error::Singular { pivot: pivot_abs });
            }
            max_pivot = max_pivot.max(pivot_abs);
            min_pivot = min_pivot.min(pivot_abs);
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for i in (k + 1)..n {
                let factor = lu[i * n + k] / pivot;
                lu[i * n + k] = factor;
                if factor != 0.0 {
                    for j in (k + 1)..n {
                        lu[i * n + j] -= factor * lu[k * n + j];
                    }
                }
            }
        }
        if max_pivot / min_pivot > MAX_PIVOT_RATIO {
            return Err(Error::Singular { pivot: min_pivot });
        }
        Ok(Self { n, lu, perm })
    }

    /// Solves `M·X = B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.n;
        if b.rows() != n {
            return Err(Error::invalid(format!(
                "solve: right-hand side has {} rows, system has {n}",
                b.rows()
            )));
        }
        let m = b.cols();
        let mut x = Matrix::zeros(n, m);
        for col in 0..m {
            let mut y: Vec<f64> = (0..n).map(|i| b.get(self.perm[i], col)).collect();
            for i in 0..n {
                let mut s = y[i];
                for (j, yj) in y.iter().enumerate().take(i) {
                    s -= self.lu[i * n + j] * yj;
                }
                y[i] = s;
            }
            for i in (0..n).rev() {
                let mut s = y[i];
                for (j, yj) in y.iter().enumerate().skip(i + 1) {
                    s -= self.lu[i * n + j] * yj;
                }
                y[i] = s / self.lu[i * n + i];
            }
            for (i, v) in y.into_iter().enumerate() {
                x.set(i, col, v);
            }
        }
        Ok(x)
    }

    /// Solves `Mᵀ·X = B`.
    pub fn solve_transpose(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.n;
        if b.rows() != n {
            return Err(Error::invalid("solve_transpose: row mismatch"));
        }
        let m = b.cols();
        let mut x = Matrix::zeros(n, m);
        // Mᵀ = Uᵀ Lᵀ P, so solve Uᵀ w = b, Lᵀ v = w, then x = Pᵀ v.
        for col in 0..m {
            let mut w: Vec<f64> = (0..n).map(|i| b.get(i, col)).collect();
            for i in 0..n {
                let mut s = w[i];
                for (j, wj) in w.iter().enumerate().take(i) {
                    s -= self.lu[j * n + i] * wj;
                }
                w[i] = s / self.lu[i * n + i];
            }
            for i in (0..n).rev() {
                let mut s = w[i];
                for (j, wj) in w.iter().enumerate().skip(i + 1) {
                    s -= self.lu[j * n + i] * wj;
                }
                w[i] = s;
            }
            for (i, v) in w.into_iter().enumerate() {
                x.set(self.perm[i], col, v);
            }
        }
        Ok(x)
    }
}

/// Solves `M·X = B` by LU with partial pivoting.
pub fn linear_solve(m: &Matrix, b: &Matrix) -> Result<Matrix> {
    Lu::factor(m)?.solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_non_finite() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn sq_distances_small_cases() {
        let z = Matrix::from_rows(&[vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(pairwise_sq_distances(&z).unwrap(), Matrix::zeros(2, 2));

        let z = Matrix::from_rows(&[vec![0.0], vec![3.0], vec![4.0]]).unwrap();
        let d = pairwise_sq_distances(&z).unwrap();
        let want =
            Matrix::from_rows(&[vec![0.0, 9.0, 16.0], vec![9.0, 0.0, 1.0], vec![16.0, 1.0, 0.0]])
                .unwrap();
        assert_eq!(d, want);

        assert!(pairwise_sq_distances(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let b = Matrix::from_rows(&[vec![1.5, -2.0], vec![3.0, 0.25]]).unwrap();
        assert_eq!(linear_solve(&Matrix::identity(2), &b).unwrap(), b);

        let m = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![2.0], vec![8.0]]).unwrap();
        let x = linear_solve(&m, &b).unwrap();
        assert_eq!(x, Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
    }

    #[test]
    fn solve_needs_pivoting() {
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0], vec![5.0]]).unwrap();
        let x = linear_solve(&m, &b).unwrap();
        assert_eq!(x, Matrix::from_rows(&[vec![5.0], vec![3.0]]).unwrap());
    }

    #[test]
    fn singular_reports_pivot() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        match linear_solve(&m, &Matrix::identity(2)) {
            Err(Error::Singular { pivot }) => assert!(pivot < 1e-12),
            other => panic!("expected singular error, got {other:?}"),
        }
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1e-14]]).unwrap();
        assert!(matches!(
            linear_solve(&m, &Matrix::identity(2)),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn transpose_solve_matches_explicit_transpose() {
        let m = Matrix::from_rows(&[
            vec![4.0, 1.0, -2.0],
            vec![0.5, 3.0, 1.0],
            vec![2.0, -1.0, 5.0],
        ])
        .unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 1.0], vec![-1.0, 3.0]]).unwrap();
        let lu = Lu::factor(&m).unwrap();
        let via_t = lu.solve_transpose(&b).unwrap();
        let direct = linear_solve(&m.transpose(), &b).unwrap();
        assert!(via_t.max_abs_diff(&direct) < 1e-13);
    }
}
