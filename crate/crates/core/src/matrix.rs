//! Dense real-matrix primitives used by the masking scheme.
//!
//! Matrices are stored row-major in a flat `Vec<f64>`. Products go through
//! `matrixmultiply`'s blocked GEMM; everything else (inversion, condition
//! estimate, the trace kernel) lives here.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Default lower bound on the 1-norm reciprocal condition number of masks.
pub const DEFAULT_MIN_RCOND: f64 = 1e-6;

/// Number of wholesale redraws `rand_invertible` attempts before giving up.
pub const MAX_INVERTIBLE_RETRIES: usize = 64;

const TRACE_TILE: usize = 64;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.rows * self.cols <= 64 {
            for r in 0..self.rows {
                write!(f, "\n  {:?}", self.row(r))?;
            }
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Matrix::zeros(dim, dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut m = Matrix::zeros(dim, dim);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * dim + i] = d;
        }
        m
    }

    /// Builds a matrix from row-major entries, rejecting non-finite values.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParameter(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix by evaluating `f(row, col)` for every entry.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
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
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self.get(i, i))
            .collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Induced 1-norm (maximum absolute column sum).
    pub fn norm_one(&self) -> f64 {
        let mut sums = vec![0.0f64; self.cols];
        for row in self.data.chunks_exact(self.cols) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v.abs();
            }
        }
        sums.into_iter().fold(0.0, f64::max)
    }

    /// Max-norm distance to the identity matrix.
    pub fn identity_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.rows {
            for (c, &v) in self.row(r).iter().enumerate() {
                let target = if r == c { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: other.rows,
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        // SAFETY: all three buffers are live, row-major, and sized m*k, k*n,
        // m*n with the strides passed below; `out` does not alias inputs.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(out)
    }

    /// `diag(d) · self`: scales row `i` by `d[i]`.
    pub fn scale_rows(&self, d: &[f64]) -> Result<Matrix> {
        if d.len() != self.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                found: d.len(),
            });
        }
        let mut out = self.clone();
        for (row, &s) in out.data.chunks_exact_mut(self.cols).zip(d) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        Ok(out)
    }

    /// `self · diag(d)`: scales column `j` by `d[j]`.
    pub fn scale_cols(&self, d: &[f64]) -> Result<Matrix> {
        if d.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                found: d.len(),
            });
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.cols) {
            row.iter_mut().zip(d).for_each(|(v, s)| *v *= s);
        }
        Ok(out)
    }

    /// Inverse by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Result<Matrix> {
        if !self.is_square() {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                found: self.cols,
            });
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = Matrix::identity(n);
        let scale = self.max_abs();
        if scale == 0.0 {
            return Err(Error::Singular);
        }
        for k in 0..n {
            let mut piv = k;
            let mut best = a.get(k, k).abs();
            for r in k + 1..n {
                let v = a.get(r, k).abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best <= f64::EPSILON * scale * n as f64 {
                return Err(Error::Singular);
            }
            if piv != k {
                a.swap_rows(piv, k);
                inv.swap_rows(piv, k);
            }
            let p = 1.0 / a.get(k, k);
            a.row_mut(k).iter_mut().for_each(|v| *v *= p);
            inv.row_mut(k).iter_mut().for_each(|v| *v *= p);

            let pivot_a = a.row(k)[k..].to_vec();
            let pivot_inv = inv.row(k).to_vec();
            for r in 0..n {
                if r == k {
                    continue;
                }
                let f = a.get(r, k);
                if f == 0.0 {
                    continue;
                }
                axpy(&mut a.row_mut(r)[k..], -f, &pivot_a);
                axpy(inv.row_mut(r), -f, &pivot_inv);
            }
        }
        if !inv.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(inv)
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        let c = self.cols;
        let (lo, hi) = (a.min(b), a.max(b));
        let (head, tail) = self.data.split_at_mut(hi * c);
        head[lo * c..(lo + 1) * c].swap_with_slice(&mut tail[..c]);
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                expected: self.rows * self.cols,
                found: other.rows * other.cols,
            });
        }
        Ok(())
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Reciprocal 1-norm condition number `1 / (‖M‖₁ ‖M⁻¹‖₁)` given both factors.
pub fn rcond_one(m: &Matrix, m_inv: &Matrix) -> f64 {
    let k = m.norm_one() * m_inv.norm_one();
    if k.is_finite() && k > 0.0 {
        1.0 / k
    } else {
        0.0
    }
}

/// Draws a `dim × dim` matrix with entries uniform on [−1, 1] and returns it
/// together with its inverse. Samples whose reciprocal condition number falls
/// below `min_rcond` are discarded and redrawn in full.
pub fn rand_invertible<R: Rng + ?Sized>(
    dim: usize,
    rng: &mut R,
    min_rcond: f64,
) -> Result<(Matrix, Matrix)> {
    if dim == 0 {
        return Err(Error::InvalidParameter(
            "dimension must be at least 1".into(),
        ));
    }
    if !(min_rcond > 0.0 && min_rcond < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "min_rcond must lie in (0, 1), got {min_rcond}"
        )));
    }
    for _ in 0..MAX_INVERTIBLE_RETRIES {
        let m = Matrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..=1.0));
        let Ok(inv) = m.inverse() else { continue };
        if rcond_one(&m, &inv) < min_rcond {
            continue;
        }
        return Ok((m, inv));
    }
    Err(Error::Conditioning {
        attempts: MAX_INVERTIBLE_RETRIES,
        min_rcond,
    })
}

/// Lower-triangular matrix with unit diagonal and strictly-lower entries
/// uniform on [−1, 1].
pub fn rand_unit_lower_triangular<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Matrix {
    let mut m = Matrix::identity(dim);
    for r in 1..dim {
        for c in 0..r {
            m.data[r * dim + c] = rng.gen_range(-1.0..=1.0);
        }
    }
    m
}

/// `Σᵢ Σⱼ A[i][j]·B[j][i]`, i.e. the trace of `A·B`, in O(d²) without forming
/// the product. The sum is walked in square tiles so that the transposed
/// access into `B` stays cache-resident.
pub fn trace_product(a: &Matrix, b: &Matrix) -> Result<f64> {
    check_square_pair(a, b)?;
    let d = a.rows;
    let mut total = 0.0;
    for_each_tile(d, |i0, i1, j0, j1| {
        let mut tile = 0.0;
        for i in i0..i1 {
            let arow = &a.data[i * d + j0..i * d + j1];
            for (off, &av) in arow.iter().enumerate() {
                tile += av * b.data[(j0 + off) * d + i];
            }
        }
        total += tile;
    });
    Ok(total)
}

/// `(tr(A·C), tr(B·C))` in a single pass over `C`. Each sum is accumulated
/// exactly as [`trace_product`] would.
pub fn trace_product_pair(a: &Matrix, b: &Matrix, c: &Matrix) -> Result<(f64, f64)> {
    check_square_pair(a, c)?;
    check_square_pair(b, c)?;
    let d = c.rows;
    let (mut ta, mut tb) = (0.0, 0.0);
    for_each_tile(d, |i0, i1, j0, j1| {
        let (mut sa, mut sb) = (0.0, 0.0);
        for i in i0..i1 {
            let arow = &a.data[i * d + j0..i * d + j1];
            let brow = &b.data[i * d + j0..i * d + j1];
            for (off, (&av, &bv)) in arow.iter().zip(brow).enumerate() {
                let cv = c.data[(j0 + off) * d + i];
                sa += av * cv;
                sb += bv * cv;
            }
        }
        ta += sa;
        tb += sb;
    });
    Ok((ta, tb))
}

fn check_square_pair(a: &Matrix, b: &Matrix) -> Result<()> {
    if !a.is_square() || !b.is_square() || a.rows != b.rows {
        return Err(Error::DimensionMismatch {
            expected: a.rows * a.cols,
            found: b.rows * b.cols,
        });
    }
    Ok(())
}

fn for_each_tile(d: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    for i0 in (0..d).step_by(TRACE_TILE) {
        let i1 = (i0 + TRACE_TILE).min(d);
        for j0 in (0..d).step_by(TRACE_TILE) {
            f(i0, i1, j0, (j0 + TRACE_TILE).min(d));
        }
    }
}

/// A bijection on `{0, …, size−1}`. `apply` sends entry `i` to slot `map[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    map: Vec<u32>,
}

impl Permutation {
    pub fn identity(size: usize) -> Self {
        Permutation {
            map: (0..size as u32).collect(),
        }
    }

    /// Validates that `map` is a bijection.
    pub fn from_vec(map: Vec<u32>) -> Result<Self> {
        if map.is_empty() {
            return Err(Error::InvalidParameter("empty permutation".into()));
        }
        let mut seen = vec![false; map.len()];
        for &m in &map {
            let slot = seen.get_mut(m as usize).ok_or(Error::NotABijection)?;
            if *slot {
                return Err(Error::NotABijection);
            }
            *slot = true;
        }
        Ok(Permutation { map })
    }

    /// Uniformly random permutation (Fisher-Yates).
    pub fn random<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Self {
        let mut map: Vec<u32> = (0..size as u32).collect();
        for i in (1..size).rev() {
            let j = rng.gen_range(0..=i);
            map.swap(i, j);
        }
        Permutation { map }
    }

    pub fn size(&self) -> usize {
        self.map.len()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.map
    }

    /// Destination slot of index `i`.
    pub fn image(&self, i: usize) -> usize {
        self.map[i] as usize
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0u32; self.map.len()];
        for (i, &m) in self.map.iter().enumerate() {
            inv[m as usize] = i as u32;
        }
        Permutation { map: inv }
    }
}

/// Returns `w` with `w[π(i)] = v[i]`.
pub fn apply_permutation(pi: &Permutation, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != pi.size() {
        return Err(Error::DimensionMismatch {
            expected: pi.size(),
            found: v.len(),
        });
    }
    let mut out = vec![0.0; v.len()];
    for (i, &x) in v.iter().enumerate() {
        out[pi.image(i)] = x;
    }
    Ok(out)
}
