//! Dense matrix kernels shared by every other module.
//!
//! [`Mat`] stores entries row-major, while [`vec`] / [`unvec`] use the
//! column-stacking convention so that `vec(P Q Rᵀ) = (R ⊗ P) vec(Q)` holds.
//! Symmetric eigendecompositions are delegated to `nalgebra`; everything else
//! is written directly against the row-major buffer.

use std::fmt;
use std::ops::{Index, IndexMut};

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{MmtrError, Result};

/// Default relative eigenvalue truncation threshold for [`psd_sqrt`].
pub const DEFAULT_PSD_TOL: f64 = 1e-10;

/// Dense real matrix in row-major layout.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(MmtrError::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Column vector (n x 1).
    pub fn column_vector(v: &[f64]) -> Self {
        Self { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn tr_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "tr_matmul row mismatch");
        let mut out = Mat::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (oj, &b) in o.iter_mut().zip(b_row) {
                    *oj += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_tr(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "matmul_tr col mismatch");
        Mat::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j)))
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mul_vec length mismatch");
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `selfᵀ · v`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "tr_mul_vec length mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_identity(&self, s: f64) -> Mat {
        let mut m = self.clone();
        for i in 0..self.rows.min(self.cols) {
            m[(i, i)] += s;
        }
        m
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                worst = worst.max((self[(r, c)] - self[(c, r)]).abs());
            }
        }
        worst
    }

    pub fn symmetrize(&self) -> Mat {
        Mat::from_fn(self.rows, self.cols, |r, c| 0.5 * (self[(r, c)] + self[(c, r)]))
    }

    /// Euclidean norms of the columns.
    pub fn column_norms(&self) -> Vec<f64> {
        let mut sq = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, x) in sq.iter_mut().zip(self.row(r)) {
                *s += x * x;
            }
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    pub fn select_columns(&self, keep: &[usize]) -> Mat {
        Mat::from_fn(self.rows, keep.len(), |r, c| self[(r, keep[c])])
    }

    /// Copy of the `nr x nc` block starting at (`r0`, `c0`).
    pub fn block(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> Mat {
        Mat::from_fn(nr, nc, |r, c| self[(r0 + r, c0 + c)])
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm1(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}

/// Neumaier-compensated sum; order-insensitive to roughly machine precision.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Column-stacking vectorization.
pub fn vec(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.rows * m.cols);
    for c in 0..m.cols {
        for r in 0..m.rows {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// Inverse of [`vec`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Mat> {
    if v.len() != rows * cols {
        return Err(MmtrError::DimensionMismatch(format!(
            "cannot unvec length {} into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(Mat::from_fn(rows, cols, |r, c| v[r + rows * c]))
}

/// Index map taking `vec(M)` to `vec(Mᵀ)` for an `rows x cols` matrix:
/// `vec(Mᵀ)[k] = vec(M)[perm[k]]`.
pub fn vec_transpose_permutation(rows: usize, cols: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(rows * cols);
    // vec(Mᵀ) walks Mᵀ (cols x rows) column by column, i.e. M row by row.
    for r in 0..rows {
        for c in 0..cols {
            perm.push(r + rows * c);
        }
    }
    perm
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = Mat::zeros(ra * rb, ca * cb);
    for i in 0..ra {
        for j in 0..ca {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            for k in 0..rb {
                for l in 0..cb {
                    out[(i * rb + k, j * cb + l)] = s * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Symmetric eigendecomposition with eigenvalues in ascending order.
pub fn sym_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.rows();
    if n == 0 {
        return (Vec::new(), Mat::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(a.symmetrize().to_nalgebra());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Minimum-norm least-squares solution of `a·x ≈ b` via SVD.
pub fn least_squares(a: &Mat, b: &[f64]) -> Vec<f64> {
    if a.is_empty() {
        return vec![0.0; a.cols()];
    }
    let svd = a.to_nalgebra().svd(true, true);
    let cutoff = 1e-14 * svd.singular_values.max();
    let rhs = nalgebra::DVector::from_column_slice(b);
    svd.solve(&rhs, cutoff).map_or_else(|_| vec![0.0; a.cols()], |x| x.as_slice().to_vec())
}

/// Square-root factor `M` of a PSD matrix with `M·Mᵀ = A`.
#[derive(Debug, Clone)]
pub struct PsdSqrt {
    /// `n x rank`; columns are eigenvectors scaled by `sqrt(eigenvalue)`.
    pub factor: Mat,
    pub rank: usize,
    /// Absolute eigenvalue threshold below which components were dropped.
    pub tolerance_used: f64,
    eigvecs: Mat,
    sqrt_vals: Vec<f64>,
}

/// Eigendecomposition-based PSD square root.
///
/// `tol` is relative to the largest absolute eigenvalue: components at or
/// below `tol·λ_max` are truncated and anything below `-tol·λ_max` is rejected.
pub fn psd_sqrt(a: &Mat, tol: f64) -> Result<PsdSqrt> {
    if a.rows() != a.cols() {
        return Err(MmtrError::DimensionMismatch(format!(
            "psd_sqrt needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let asym = a.max_asymmetry();
    if asym > tol.max(1e-12) * a.max_abs().max(f64::MIN_POSITIVE) {
        return Err(MmtrError::NotSymmetric { asymmetry: asym });
    }
    let (vals, vecs) = sym_eigen(a);
    let scale = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let threshold = tol * scale;
    if let Some(&lowest) = vals.first() {
        if lowest < -threshold {
            return Err(MmtrError::NotPsd { eigenvalue: lowest });
        }
    }
    // Largest first so the factor's leading columns carry the most variance.
    let keep: Vec<usize> = (0..n).rev().filter(|&i| vals[i] > threshold && vals[i] > 0.0).collect();
    let eigvecs = vecs.select_columns(&keep);
    let sqrt_vals: Vec<f64> = keep.iter().map(|&i| vals[i].sqrt()).collect();
    let factor = Mat::from_fn(n, keep.len(), |r, c| eigvecs[(r, c)] * sqrt_vals[c]);
    Ok(PsdSqrt { rank: keep.len(), factor, tolerance_used: threshold, eigvecs, sqrt_vals })
}

impl PsdSqrt {
    /// Symmetric root `U D^{-1/2} Uᵀ` over the retained components.
    pub fn inverse_symmetric(&self) -> Mat {
        let n = self.eigvecs.rows();
        Mat::from_fn(n, n, |r, c| (0..self.rank).map(|k| self.eigvecs[(r, k)] * self.eigvecs[(c, k)] / self.sqrt_vals[k]).sum())
    }
}

/// Moore–Penrose inverse of the factor returned by [`psd_sqrt`] (`rank x n`).
pub fn pinv_factor(s: &PsdSqrt) -> Mat {
    let n = s.eigvecs.rows();
    Mat::from_fn(s.rank, n, |r, c| s.eigvecs[(c, r)] / s.sqrt_vals[r])
}

/// Rotates `l` so its row `j` becomes the first standard basis vector.
///
/// Returns `(c·L·Q_jᵀ, c)` where `Q_j` is the Householder reflection sending
/// row `j` to `‖l_j‖·e1` and `c = 1/‖l_j‖`.
pub fn householder_normalize(l: &Mat, j: usize) -> Result<(Mat, f64)> {
    if j >= l.rows() {
        return Err(MmtrError::DimensionMismatch(format!(
            "row index {j} out of range for {} rows",
            l.rows()
        )));
    }
    let rotated = householder_rotate(l, j)?;
    let row_norm = rotated[(j, 0)];
    let c = 1.0 / row_norm;
    let mut out = rotated.scale(c);
    // Exact basis row; the reflection leaves round-off in the trailing entries.
    out.row_mut(j).iter_mut().enumerate().for_each(|(k, x)| *x = if k == 0 { 1.0 } else { 0.0 });
    Ok((out, c))
}

/// `L·Q_jᵀ` without the rescaling; row `j` becomes `(‖l_j‖, 0, …, 0)`.
pub fn householder_rotate(l: &Mat, j: usize) -> Result<Mat> {
    let s = l.cols();
    let v = l.row(j).to_vec();
    let nv = norm2(&v);
    let scale_ref = l.frobenius_norm().max(1.0);
    if s == 0 || nv <= f64::EPSILON * scale_ref {
        return Err(MmtrError::ZeroRow { row: j });
    }
    // u = v - ‖v‖ e1, with the first entry computed without cancellation.
    let mut u = v.clone();
    let tail_sq: f64 = v[1..].iter().map(|x| x * x).sum();
    u[0] = if v[0] <= 0.0 { v[0] - nv } else { -tail_sq / (v[0] + nv) };
    let uu = dot(&u, &u);
    let mut out = l.clone();
    if uu > 0.0 {
        let beta = 2.0 / uu;
        for r in 0..l.rows() {
            let row = out.row_mut(r);
            let proj = beta * dot(row, &u);
            for (x, ui) in row.iter_mut().zip(&u) {
                *x -= proj * ui;
            }
        }
    }
    Ok(out)
}

/// Nearest Kronecker product `sigma ≈ Σ2 ⊗ Σ1` in Frobenius norm
/// (Σ1 is `q1 x q1`, Σ2 is `q2 x q2`) via the rank-one rearrangement.
pub fn nearest_kron(sigma: &Mat, q1: usize, q2: usize) -> Result<(Mat, Mat)> {
    let n = q1 * q2;
    if sigma.shape() != (n, n) || n == 0 {
        return Err(MmtrError::DimensionMismatch(format!(
            "expected {n}x{n} matrix, got {}x{}",
            sigma.rows(),
            sigma.cols()
        )));
    }
    // Row (a + q2·b) of the rearrangement is vec of block (a, b).
    let rearranged = Mat::from_fn(q2 * q2, q1 * q1, |row, col| {
        let (a, b) = (row % q2, row / q2);
        let (r, c) = (col % q1, col / q1);
        sigma[(a * q1 + r, b * q1 + c)]
    });
    let mut v = vec![0.0; q1 * q1];
    for a in 0..q2 {
        let row = rearranged.row(a + q2 * a);
        for (vi, x) in v.iter_mut().zip(row) {
            *vi += x;
        }
    }
    if norm2(&v) == 0.0 {
        if let Some(r) = (0..q2 * q2).find(|&r| norm2(rearranged.row(r)) > 0.0) {
            v = rearranged.row(r).to_vec();
        } else {
            return Ok((Mat::zeros(q1, q1), Mat::zeros(q2, q2)));
        }
    }
    normalize(&mut v);
    for _ in 0..10_000 {
        let u = rearranged.mul_vec(&v);
        let mut next = rearranged.tr_mul_vec(&u);
        if norm2(&next) == 0.0 {
            break;
        }
        normalize(&mut next);
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < 1e-15 {
            break;
        }
    }
    let u = rearranged.mul_vec(&v);
    let sv = norm2(&u);
    let root = sv.sqrt();
    let mut s1 = unvec(&v.iter().map(|x| x * root).collect::<Vec<_>>(), q1, q1)?;
    let mut s2 = unvec(&u.iter().map(|x| x / sv * root).collect::<Vec<_>>(), q2, q2)?;
    if s1.trace() < 0.0 {
        s1 = s1.scale(-1.0);
        s2 = s2.scale(-1.0);
    }
    Ok((s1, s2))
}

fn normalize(v: &mut [f64]) {
    let n = norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Mat,
}

impl Cholesky {
    pub fn new(a: &Mat) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(MmtrError::DimensionMismatch("cholesky of non-square matrix".into()));
        }
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) {
                return Err(MmtrError::NotPositiveDefinite);
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn lower(&self) -> &Mat {
        &self.lower
    }

    /// Solves `L z = b`.
    pub fn forward(&self, b: &[f64]) -> Vec<f64> {
        let l = &self.lower;
        let n = l.rows();
        let mut z = b.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s -= l[(i, k)] * z[k];
            }
            z[i] = s / l[(i, i)];
        }
        z
    }

    /// Solves `Lᵀ x = z`.
    pub fn backward(&self, z: &[f64]) -> Vec<f64> {
        let l = &self.lower;
        let n = l.rows();
        let mut x = z.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        x
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.backward(&self.forward(b))
    }

    pub fn inverse(&self) -> Mat {
        let n = self.lower.rows();
        let mut inv = Mat::zeros(n, n);
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[c] = 1.0;
            let col = self.solve(&e);
            for r in 0..n {
                inv[(r, c)] = col[r];
            }
        }
        inv.symmetrize()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diag().iter().map(|d| d.ln()).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
        a.sub(b).max_abs()
    }

    #[test]
    fn vec_is_column_stacking() {
        let m = Mat::from_rows(&[vec![1.0, 3.0], vec![2.0, 4.0]]);
        assert_eq!(vec(&m), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unvec_round_trip_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mat(&mut rng, 3, 4);
        assert_eq!(unvec(&vec(&m), 3, 4).unwrap(), m);
        assert!(matches!(unvec(&[1.0, 2.0, 3.0], 2, 2), Err(MmtrError::DimensionMismatch(_))));
    }

    #[test]
    fn trace_inner_product_matches_vec_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_mat(&mut rng, 4, 3);
        let b = random_mat(&mut rng, 4, 3);
        // Elementwise oracle for tr(XᵀB).
        let mut oracle = 0.0;
        for i in 0..4 {
            for j in 0..3 {
                oracle += x[(i, j)] * b[(i, j)];
            }
        }
        assert!((x.tr_matmul(&b).trace() - oracle).abs() < 1e-14);
        assert!((dot(&vec(&x), &vec(&b)) - oracle).abs() < 1e-14);
    }

    #[test]
    fn kron_identity_and_scalar() {
        assert_eq!(kron(&Mat::identity(2), &Mat::identity(3)), Mat::identity(6));
        let b = Mat::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        assert_eq!(kron(&Mat::from_rows(&[vec![2.0]]), &b), b.scale(2.0));
    }

    #[test]
    fn kron_vec_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l1 = random_mat(&mut rng, 4, 2);
        let c = random_mat(&mut rng, 2, 3);
        let l2 = random_mat(&mut rng, 5, 3);
        let lhs = vec(&l1.matmul(&c).matmul_tr(&l2));
        let rhs = kron(&l2, &l1).mul_vec(&vec(&c));
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn transpose_permutation_matches_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_mat(&mut rng, 3, 5);
        let v = vec(&m);
        let perm = vec_transpose_permutation(3, 5);
        let permuted: Vec<f64> = perm.iter().map(|&k| v[k]).collect();
        assert_eq!(permuted, vec(&m.transpose()));
    }

    #[test]
    fn psd_sqrt_identity_and_diagonal() {
        let s = psd_sqrt(&Mat::identity(3), DEFAULT_PSD_TOL).unwrap();
        assert_eq!(s.rank, 3);
        assert!(max_abs_diff(&s.factor.matmul_tr(&s.factor), &Mat::identity(3)) < 1e-14);

        let d = Mat::from_diag(&[4.0, 0.0, 1.0]);
        let s = psd_sqrt(&d, DEFAULT_PSD_TOL).unwrap();
        assert_eq!(s.rank, 2);
        assert!(max_abs_diff(&s.factor.matmul_tr(&s.factor), &d) < 1e-12);
    }

    #[test]
    fn psd_sqrt_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = random_mat(&mut rng, 5, 2);
        let a = l.matmul_tr(&l);
        let s = psd_sqrt(&a, DEFAULT_PSD_TOL).unwrap();
        // Rank oracle: count eigenvalues above the threshold.
        let (vals, _) = sym_eigen(&a);
        let top = vals.last().copied().unwrap();
        assert_eq!(vals.iter().filter(|&&v| v > 1e-10 * top).count(), 2);
        assert_eq!(s.rank, 2);
        assert!(s.factor.matmul_tr(&s.factor).sub(&a).frobenius_norm() < 1e-12 * a.frobenius_norm());
    }

    #[test]
    fn psd_sqrt_errors() {
        let asym = Mat::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]);
        assert!(matches!(psd_sqrt(&asym, 1e-10), Err(MmtrError::NotSymmetric { .. })));
        let indefinite = Mat::from_diag(&[1.0, -0.5]);
        assert!(matches!(psd_sqrt(&indefinite, 1e-10), Err(MmtrError::NotPsd { .. })));
        let zero = psd_sqrt(&Mat::zeros(3, 3), 1e-10).unwrap();
        assert_eq!(zero.rank, 0);
        assert_eq!(zero.factor.shape(), (3, 0));
    }

    #[test]
    fn pinv_factor_moore_penrose() {
        let s = psd_sqrt(&Mat::identity(4), DEFAULT_PSD_TOL).unwrap();
        let g = pinv_factor(&s);
        assert!(max_abs_diff(&g.matmul(&s.factor), &Mat::identity(4)) < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l = random_mat(&mut rng, 6, 3);
        let s = psd_sqrt(&l.matmul_tr(&l), DEFAULT_PSD_TOL).unwrap();
        let f = &s.factor;
        let g = pinv_factor(&s);
        assert!(max_abs_diff(&g.matmul(f).matmul(&g), &g) < 1e-10);
        assert!(max_abs_diff(&f.matmul(&g).matmul(f), f) < 1e-10);
        // Projection oracle: vectors in col(L) are reproduced by F·G.
        let v = l.mul_vec(&[0.3, -1.2, 0.7]);
        let back = f.mul_vec(&g.mul_vec(&v));
        for (a, b) in back.iter().zip(&v) {
            assert!((a - b).abs() < 1e-10);
        }
        let p = g.matmul(f);
        assert!(max_abs_diff(&p.matmul(&p), &p) < 1e-10);
        assert!(p.max_asymmetry() < 1e-10);
    }

    #[test]
    fn householder_already_normalized_is_identity() {
        let l = Mat::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.0], vec![0.5, 0.9]]);
        let (out, c) = householder_normalize(&l, 1).unwrap();
        assert_eq!(c, 1.0);
        assert_eq!(out.row(1), &[1.0, 0.0]);
        for r in 0..3 {
            assert!((out[(r, 0)].abs() - l[(r, 0)].abs()).abs() < 1e-15);
            assert!((out[(r, 1)] - l[(r, 1)]).abs() < 1e-15);
        }
    }

    #[test]
    fn householder_gram_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = random_mat(&mut rng, 4, 2);
        let (out, c) = householder_normalize(&l, 2).unwrap();
        assert_eq!(out.row(2), &[1.0, 0.0]);
        let row_sq = dot(l.row(2), l.row(2));
        assert!((c * c - 1.0 / row_sq).abs() < 1e-14 / row_sq);
        let expect = l.matmul_tr(&l).scale(1.0 / row_sq);
        let got = out.matmul_tr(&out);
        assert!(got.sub(&expect).frobenius_norm() < 1e-12 * expect.frobenius_norm());
    }

    #[test]
    fn householder_identifies_kronecker_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l1 = random_mat(&mut rng, 3, 2);
        let l2 = random_mat(&mut rng, 4, 2);
        let j = 1;
        let (l2n, _) = householder_normalize(&l2, j).unwrap();
        let s1 = l1.matmul_tr(&l1);
        let s2 = l2n.matmul_tr(&l2n);
        assert!((s2[(j, j)] - 1.0).abs() < 1e-12);
        let k = kron(&s2, &s1);
        let block = k.block(j * 3, j * 3, 3, 3);
        assert!(max_abs_diff(&block, &s1) < 1e-12);
    }

    #[test]
    fn householder_zero_row() {
        let l = Mat::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]);
        assert!(matches!(householder_normalize(&l, 1), Err(MmtrError::ZeroRow { row: 1 })));
    }

    #[test]
    fn nearest_kron_exact_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_mat(&mut rng, 3, 3);
        let b = random_mat(&mut rng, 2, 2);
        let s1 = a.matmul_tr(&a);
        let s2 = b.matmul_tr(&b);
        let sigma = kron(&s2, &s1);
        let (o1, o2) = nearest_kron(&sigma, 3, 2).unwrap();
        assert!(sigma.sub(&kron(&o2, &o1)).frobenius_norm() < 1e-10);

        let (i1, i2) = nearest_kron(&Mat::identity(6), 2, 3).unwrap();
        assert!(Mat::identity(6).sub(&kron(&i2, &i1)).frobenius_norm() < 1e-12);
        let a = i1[(0, 0)];
        assert!(i1.sub(&Mat::identity(2).scale(a)).max_abs() < 1e-12);
    }

    #[test]
    fn nearest_kron_beats_generating_factors_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_mat(&mut rng, 3, 3);
        let b = random_mat(&mut rng, 3, 3);
        let s1 = a.matmul_tr(&a);
        let s2 = b.matmul_tr(&b);
        let noise = random_mat(&mut rng, 9, 9);
        let sigma = kron(&s2, &s1).add(&noise.matmul_tr(&noise).scale(0.05));
        let (o1, o2) = nearest_kron(&sigma, 3, 3).unwrap();
        let fitted = sigma.sub(&kron(&o2, &o1)).frobenius_norm();
        let generating = sigma.sub(&kron(&s2, &s1)).frobenius_norm();
        assert!(fitted <= generating + 1e-12);
    }

    #[test]
    fn nearest_kron_rejects_bad_shape() {
        assert!(nearest_kron(&Mat::identity(5), 2, 2).is_err());
    }

    #[test]
    fn cholesky_solve_and_logdet() {
        let a = Mat::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        let ch = Cholesky::new(&a).unwrap();
        let x = ch.solve(&[1.0, 2.0]);
        let back = a.mul_vec(&x);
        assert!((back[0] - 1.0).abs() < 1e-14 && (back[1] - 2.0).abs() < 1e-14);
        assert!((ch.log_det() - 11.0_f64.ln()).abs() < 1e-14);
        assert!(Cholesky::new(&Mat::from_diag(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn compensated_sum_is_order_insensitive() {
        let vals = [1e16, 1.0, -1e16, 1.0, 3.5, -2.25];
        let fwd = compensated_sum(vals.iter().copied());
        let rev = compensated_sum(vals.iter().rev().copied());
        assert_eq!(fwd, 3.25);
        assert_eq!(rev, 3.25);
    }

    proptest! {
        #[test]
        fn kron_is_bilinear(seed in any::<u64>(), alpha in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mat(&mut rng, 2, 3);
            let b = random_mat(&mut rng, 3, 2);
            let lhs = kron(&a.scale(alpha), &b);
            let rhs = kron(&a, &b).scale(alpha);
            prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-12 * rhs.max_abs().max(1.0));
        }

        #[test]
        fn vec_kron_identity_random_shapes(seed in any::<u64>(),
                                           p in 1usize..5, q in 1usize..5, r in 1usize..5, s in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pm = random_mat(&mut rng, p, q);
            let qm = random_mat(&mut rng, q, s);
            let rm = random_mat(&mut rng, r, s);
            let lhs = vec(&pm.matmul(&qm).matmul_tr(&rm));
            let rhs = kron(&rm, &pm).mul_vec(&vec(&qm));
            for (x, y) in lhs.iter().zip(&rhs) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn psd_sqrt_reconstructs(seed in any::<u64>(), n in 1usize..7, k in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = random_mat(&mut rng, n, k);
            let a = l.matmul_tr(&l);
            let s = psd_sqrt(&a, DEFAULT_PSD_TOL).unwrap();
            let err = s.factor.matmul_tr(&s.factor).sub(&a).frobenius_norm();
            prop_assert!(err <= 1e-10 * a.frobenius_norm().max(1e-300));
        }

        #[test]
        fn householder_preserves_scaled_gram(seed in any::<u64>(), q in 1usize..6, s in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = random_mat(&mut rng, q, s);
            let j = (seed as usize) % q;
            let (out, c) = householder_normalize(&l, j).unwrap();
            let expect = l.matmul_tr(&l).scale(c * c);
            let got = out.matmul_tr(&out);
            prop_assert!(got.sub(&expect).frobenius_norm() <= 1e-12 * expect.frobenius_norm().max(1.0));
            prop_assert_eq!(out[(j, 0)], 1.0);
        }
    }
}
