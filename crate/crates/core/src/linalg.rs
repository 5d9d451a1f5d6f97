//! Dense row-major matrices and the structured products the curvature code
//! is built from.
//!
//! General matrix products go through `matrixmultiply`'s single-threaded
//! `dgemm`, whose kernel order is fixed for a given shape, so results are
//! reproducible run to run. Transposed operands are expressed through
//! strides and never copied.

use std::fmt;
use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            let row = &self.row(i)[..self.cols.min(8)];
            writeln!(f, "  {row:?}")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!(
                "buffer of length {} cannot form a {rows}x{cols} matrix",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(shape_err!("row {i} has {} entries, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
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

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Self { rows: values.len(), cols: 1, data: values.to_vec() }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn col_vec(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * alpha).collect() }
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err!(
                "{op}: {}x{} vs {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Sum of elementwise products, i.e. `vec(self)ᵀ vec(other)`.
    pub fn dot(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn row_means(&self) -> Vec<f64> {
        let c = self.cols.max(1) as f64;
        self.row_sums().into_iter().map(|s| s / c).collect()
    }

    /// Copy with one extra row of constant `value` appended at the bottom.
    pub fn with_appended_row(&self, value: f64) -> Matrix {
        let mut data = Vec::with_capacity((self.rows + 1) * self.cols);
        data.extend_from_slice(&self.data);
        data.extend(std::iter::repeat_n(value, self.cols));
        Matrix { rows: self.rows + 1, cols: self.cols, data }
    }

    /// Copy with one extra column appended on the right.
    pub fn with_appended_col(&self, col: &[f64]) -> Result<Matrix> {
        if col.len() != self.rows {
            return Err(shape_err!("appended column has {} entries, need {}", col.len(), self.rows));
        }
        let mut out = Matrix::zeros(self.rows, self.cols + 1);
        for i in 0..self.rows {
            out.row_mut(i)[..self.cols].copy_from_slice(self.row(i));
            out.data[i * (self.cols + 1) + self.cols] = col[i];
        }
        Ok(out)
    }

    /// Splits off the last column: returns (left block, last column).
    pub fn split_last_col(&self) -> (Matrix, Vec<f64>) {
        assert!(self.cols >= 1);
        let c = self.cols - 1;
        let mut left = Matrix::zeros(self.rows, c);
        let mut last = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            left.row_mut(i).copy_from_slice(&self.row(i)[..c]);
            last.push(self.data[i * self.cols + c]);
        }
        (left, last)
    }

    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            let src = self.row(i);
            let dst = out.row_mut(i);
            for (d, &j) in dst.iter_mut().zip(idx) {
                *d = src[j];
            }
        }
        out
    }

    pub fn submatrix(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }

    pub fn set_submatrix(&mut self, r0: usize, c0: usize, block: &Matrix) {
        for i in 0..block.rows {
            let dst = &mut self.data[(r0 + i) * self.cols + c0..(r0 + i) * self.cols + c0 + block.cols];
            dst.copy_from_slice(block.row(i));
        }
    }

    /// `(A + Aᵀ)/2`; requires a square matrix.
    pub fn symmetrized(&self) -> Result<Matrix> {
        if self.rows != self.cols {
            return Err(shape_err!("symmetrize needs a square matrix, got {}x{}", self.rows, self.cols));
        }
        Ok(Matrix::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)])))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.rows.min(self.cols) {
            for j in 0..i {
                m = m.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        m
    }

    /// Column-major vectorization, `vec(A)`.
    pub fn vec_col_major(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                v.push(self.data[i * self.cols + j]);
            }
        }
        v
    }

    /// Inverse of [`Matrix::vec_col_major`].
    pub fn from_col_major(rows: usize, cols: usize, v: &[f64]) -> Result<Matrix> {
        if v.len() != rows * cols {
            return Err(shape_err!("vector of length {} cannot unvec to {rows}x{cols}", v.len()));
        }
        Ok(Matrix::from_fn(rows, cols, |i, j| v[j * rows + i]))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Whether a gemm operand is used as stored or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

fn op_shape(m: &Matrix, op: Op) -> (usize, usize) {
    match op {
        Op::N => (m.rows, m.cols),
        Op::T => (m.cols, m.rows),
    }
}

fn op_strides(m: &Matrix, op: Op) -> (isize, isize) {
    match op {
        Op::N => (m.cols as isize, 1),
        Op::T => (1, m.cols as isize),
    }
}

/// `c ← alpha·op(a)·op(b) + beta·c`.
pub fn gemm(alpha: f64, a: &Matrix, ta: Op, b: &Matrix, tb: Op, beta: f64, c: &mut Matrix) -> Result<()> {
    let (m, k) = op_shape(a, ta);
    let (k2, n) = op_shape(b, tb);
    if k != k2 {
        return Err(shape_err!("matmul inner dimensions differ: {m}x{k} by {k2}x{n}"));
    }
    if c.shape() != (m, n) {
        return Err(shape_err!("gemm output is {}x{}, expected {m}x{n}", c.rows, c.cols));
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        c.scale_in_place(beta);
        return Ok(());
    }
    let (rsa, csa) = op_strides(a, ta);
    let (rsb, csb) = op_strides(b, tb);
    // SAFETY: shapes and strides were validated above; all three buffers are
    // distinct allocations (c is borrowed mutably, a and b shared).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(())
}

fn product(a: &Matrix, ta: Op, b: &Matrix, tb: Op) -> Result<Matrix> {
    let (m, _) = op_shape(a, ta);
    let (_, n) = op_shape(b, tb);
    let mut c = Matrix::zeros(m, n);
    gemm(1.0, a, ta, b, tb, 0.0, &mut c)?;
    Ok(c)
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    product(a, Op::N, b, Op::N)
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    product(a, Op::T, b, Op::N)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    product(a, Op::N, b, Op::T)
}

/// Kronecker product; block `(i, j)` of the result is `a[i,j]·b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (br, bc) = b.shape();
    let mut out = Matrix::zeros(a.rows * br, a.cols * bc);
    for i in 0..a.rows {
        for j in 0..a.cols {
            let s = a[(i, j)];
            for k in 0..br {
                let dst = (i * br + k) * out.cols + j * bc;
                for l in 0..bc {
                    out.data[dst + l] = s * b.data[k * bc + l];
                }
            }
        }
    }
    out
}

/// A matrix partitioned into a grid of blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMatrix {
    row_parts: Vec<usize>,
    col_parts: Vec<usize>,
    blocks: Vec<Matrix>,
}

impl BlockMatrix {
    /// `blocks` is row-major over the partition grid.
    pub fn new(row_parts: Vec<usize>, col_parts: Vec<usize>, blocks: Vec<Matrix>) -> Result<Self> {
        if blocks.len() != row_parts.len() * col_parts.len() {
            return Err(shape_err!(
                "{} blocks for a {}x{} partition",
                blocks.len(),
                row_parts.len(),
                col_parts.len()
            ));
        }
        for (bi, &r) in row_parts.iter().enumerate() {
            for (bj, &c) in col_parts.iter().enumerate() {
                let blk = &blocks[bi * col_parts.len() + bj];
                if blk.shape() != (r, c) {
                    return Err(shape_err!(
                        "block ({bi},{bj}) is {}x{}, partition wants {r}x{c}",
                        blk.rows,
                        blk.cols
                    ));
                }
            }
        }
        Ok(Self { row_parts, col_parts, blocks })
    }

    pub fn single(m: Matrix) -> Self {
        Self { row_parts: vec![m.rows], col_parts: vec![m.cols], blocks: vec![m] }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.row_parts.len(), self.col_parts.len())
    }

    pub fn block(&self, i: usize, j: usize) -> &Matrix {
        &self.blocks[i * self.col_parts.len() + j]
    }

    pub fn to_dense(&self) -> Matrix {
        let rows = self.row_parts.iter().sum();
        let cols = self.col_parts.iter().sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut r0 = 0;
        for (i, &r) in self.row_parts.iter().enumerate() {
            let mut c0 = 0;
            for (j, &c) in self.col_parts.iter().enumerate() {
                out.set_submatrix(r0, c0, self.block(i, j));
                c0 += c;
            }
            r0 += r;
        }
        out
    }
}

/// Khatri–Rao product of two identically gridded block matrices: block
/// `(l, l′)` of the result is `kron(a{l,l′}, h{l,l′})`.
pub fn khatri_rao_block(a: &BlockMatrix, h: &BlockMatrix) -> Result<Matrix> {
    if a.grid() != h.grid() {
        return Err(shape_err!("Khatri-Rao partitions differ: {:?} vs {:?}", a.grid(), h.grid()));
    }
    let (gr, gc) = a.grid();
    let row_parts: Vec<usize> = (0..gr).map(|i| a.row_parts[i] * h.row_parts[i]).collect();
    let col_parts: Vec<usize> = (0..gc).map(|j| a.col_parts[j] * h.col_parts[j]).collect();
    let mut blocks = Vec::with_capacity(gr * gc);
    for i in 0..gr {
        for j in 0..gc {
            blocks.push(kron(a.block(i, j), h.block(i, j)));
        }
    }
    Ok(BlockMatrix::new(row_parts, col_parts, blocks)?.to_dense())
}

/// Smallest eigenvalue of the symmetric part `(A+Aᵀ)/2`.
pub fn min_eigenvalue_sym(a: &Matrix) -> Result<f64> {
    let s = a.symmetrized()?;
    s.ensure_finite("eigenvalue input")?;
    if s.rows == 0 {
        return Err(shape_err!("eigenvalue of an empty matrix"));
    }
    let dm = DMatrix::from_row_slice(s.rows, s.cols, &s.data);
    let eig = dm.symmetric_eigenvalues();
    Ok(eig.iter().copied().fold(f64::INFINITY, f64::min))
}
