//! Dense linear-algebra kernel: row-major `f64` matrices, products, thin QR,
//! a one-sided Jacobi SVD for small matrices, and a randomized truncated SVD.
//!
//! Everything here computes in 64-bit precision and is a pure function of its
//! inputs; values are freely shareable across threads.

mod qr;
mod rsvd;
mod svd;

pub use qr::{qr_thin, QrFactors};
pub use rsvd::{truncated_svd, DEFAULT_SVD_ITERS, MAX_OVERSAMPLING};
pub use svd::{svd_dense, svd_dense_with_cap, DENSE_SVD_CAP, JACOBI_MAX_SWEEPS, JACOBI_TOL};

use crate::error::{Error, Result};

/// Dense real matrix, row-major storage: `data[i * cols + j]` holds entry (i, j).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, validating length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Param {
                name: "rows/cols",
                reason: format!("dimensions must be positive, got {rows}x{cols}"),
            });
        }
        if data.len() != rows * cols {
            return Err(Error::Param {
                name: "data",
                reason: format!(
                    "expected {} entries for a {rows}x{cols} matrix, got {}",
                    rows * cols,
                    data.len()
                ),
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("matrix entry ({}, {})", pos / cols, pos % cols),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        if r == 0 {
            return Err(Error::Param {
                name: "rows",
                reason: "at least one row required".into(),
            });
        }
        let c = rows[0].len();
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Param {
                name: "rows",
                reason: "rows have inconsistent lengths".into(),
            });
        }
        Self::new(r, c, rows.concat())
    }

    /// Square matrix with the given diagonal, zeros elsewhere.
    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Standard matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape {
                op: "matmul",
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: rhs.rows,
                right_cols: rhs.cols,
            });
        }
        let n = rhs.cols;
        let mut out = Matrix::zeros(self.rows, n);
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = &rhs.data[k * n..(k + 1) * n];
                for j in 0..n {
                    out_row[j] += aik * b_row[j];
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    fn zip_with(
        &self,
        rhs: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::Shape {
                op,
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: rhs.rows,
                right_cols: rhs.cols,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * factor).collect(),
        }
    }

    /// Scales column `j` by `factors[j]` (used to fold singular values into a factor).
    pub fn scale_columns(&self, factors: &[f64]) -> Result<Matrix> {
        if factors.len() != self.cols {
            return Err(Error::Param {
                name: "factors",
                reason: format!(
                    "expected {} column factors, got {}",
                    self.cols,
                    factors.len()
                ),
            });
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = &mut out.data[i * self.cols..(i + 1) * self.cols];
            for (x, &f) in row.iter_mut().zip(factors) {
                *x *= f;
            }
        }
        Ok(out)
    }

    /// New matrix holding the first `k` columns.
    pub fn take_columns(&self, k: usize) -> Matrix {
        assert!(k >= 1 && k <= self.cols, "column count out of range");
        Matrix::from_fn(self.rows, k, |i, j| self.get(i, j))
    }

    /// New matrix holding the listed columns, in order.
    pub fn select_columns(&self, indices: &[usize]) -> Matrix {
        assert!(!indices.is_empty(), "at least one column required");
        Matrix::from_fn(self.rows, indices.len(), |i, j| self.get(i, indices[j]))
    }

    /// Square root of the sum of squared entries.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum::<f64>().sqrt()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc.max(x.abs()))
    }

    /// Largest absolute entrywise difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, rhs: &Matrix) -> f64 {
        assert_eq!(
            (self.rows, self.cols),
            (rhs.rows, rhs.cols),
            "max_abs_diff requires equal shapes"
        );
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(0.0, |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    /// Whitespace-delimited text form, one row per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.rows {
            let row: Vec<String> = self.row(i).iter().map(|x| format!("{x:?}")).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    /// Parses the text form written by [`Matrix::to_text`]: one row per line,
    /// entries separated by whitespace. Blank lines are ignored.
    pub fn from_text(text: &str) -> Result<Matrix> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for tok in line.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| Error::Format {
                    reason: format!("line {}: `{tok}` is not a number", lineno + 1),
                })?;
                row.push(v);
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Format {
                reason: "no rows in matrix text".into(),
            });
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Format {
                reason: "rows have inconsistent lengths".into(),
            });
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Truncated singular factorization `U diag(S) V^T`.
///
/// `u` is m x k, `s` holds k nonnegative values sorted nonincreasing, and `v`
/// is n x k (so the reconstruction uses `v.transpose()`).
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank_k(&self) -> usize {
        self.s.len()
    }

    /// `U diag(S) V^T`.
    pub fn reconstruct(&self) -> Result<Matrix> {
        let us = self.u.scale_columns(&self.s)?;
        us.matmul(&self.v.transpose())
    }

    /// Keeps only the top `k` singular triplets.
    pub fn truncated(&self, k: usize) -> Result<SvdFactors> {
        if k == 0 || k > self.s.len() {
            return Err(Error::Param {
                name: "k",
                reason: format!("truncation rank {k} outside 1..={}", self.s.len()),
            });
        }
        Ok(SvdFactors {
            u: self.u.take_columns(k),
            s: self.s[..k].to_vec(),
            v: self.v.take_columns(k),
        })
    }

    /// Largest deviation of `U^T U` and `V^T V` from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let defect = |m: &Matrix| {
            let g = m.transpose().matmul(m).expect("gram product");
            let k = g.rows();
            let mut worst = 0.0f64;
            for i in 0..k {
                for j in 0..k {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((g.get(i, j) - expect).abs());
                }
            }
            worst
        };
        defect(&self.u).max(defect(&self.v))
    }
}

/// Fixes factor signs so factorizations are reproducible: each U column's
/// largest-magnitude entry is made positive and the matching V column is
/// flipped with it (first occurrence wins on magnitude ties).
pub(crate) fn normalize_signs(u: &mut Matrix, v: &mut Matrix) {
    debug_assert_eq!(u.cols(), v.cols());
    for j in 0..u.cols() {
        let mut best = 0.0f64;
        let mut idx = 0usize;
        for i in 0..u.rows() {
            let a = u.get(i, j).abs();
            if a > best {
                best = a;
                idx = i;
            }
        }
        if u.get(idx, j) < 0.0 {
            for i in 0..u.rows() {
                let x = u.get(i, j);
                u.set(i, j, -x);
            }
            for i in 0..v.rows() {
                let x = v.get(i, j);
                v.set(i, j, -x);
            }
        }
    }
}
