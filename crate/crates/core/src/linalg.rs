//! Small dense linear algebra on row-major storage.
//!
//! The EM inner loops touch one feature row and one triangular factor at a
//! time, so a flat row-major layout with hand-written kernels is used instead
//! of a general matrix library.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, T::one())
    }

    pub fn scaled_identity(n: usize, s: T) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = s;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a 0×0 matrix.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        // chunks_exact on an empty buffer with cols=0 would panic
        (0..self.rows).map(move |i| self.row(i))
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Column subset, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            let row = self.row(i);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Self {
            rows: self.rows,
            cols: cols.len(),
            data,
        }
    }

    /// Row subset, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Largest |A_ij − A_ji|. Zero for symmetric matrices; only meaningful when square.
    pub fn max_asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Replaces A with (A + Aᵀ)/2, making it exactly symmetric.
    pub fn symmetrize(&mut self) {
        let n = self.rows;
        let half = T::lit(0.5);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = (self.get(i, j) + self.get(j, i)) * half;
                self.set(i, j, v);
                self.set(j, i, v);
            }
        }
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Lower Cholesky factor `L` of an SPD matrix together with `L⁻¹` and `ln det`.
///
/// `L⁻¹` is kept so the quadratic form in the density is a triangular
/// matrix-vector product with independent rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor<T> {
    dim: usize,
    lower: Vec<T>,
    inv_lower: Vec<T>,
    log_det: T,
}

impl<T: Scalar> CholeskyFactor<T> {
    /// Plain Cholesky. `None` if a pivot is non-positive or non-finite.
    pub fn new(a: &Matrix<T>) -> Option<Self> {
        let n = a.rows();
        if a.cols() != n {
            return None;
        }
        let mut l = vec![T::zero(); n * n];
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > T::zero()) || !d.is_finite() {
                return None;
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        let log_det = T::lit(2.0) * (0..n).map(|i| l[i * n + i].ln()).sum::<T>();
        let inv_lower = invert_lower(&l, n);
        if !log_det.is_finite() || inv_lower.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(Self {
            dim: n,
            lower: l,
            inv_lower,
            log_det,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn log_det(&self) -> T {
        self.log_det
    }

    /// Row-major lower factor.
    pub fn lower(&self) -> &[T] {
        &self.lower
    }

    /// ‖L⁻¹ d‖².
    #[inline]
    pub fn mahalanobis_sq(&self, diff: &[T]) -> T {
        let n = self.dim;
        debug_assert_eq!(diff.len(), n);
        let mut total = T::zero();
        for i in 0..n {
            let row = &self.inv_lower[i * n..i * n + i + 1];
            let z: T = row.iter().zip(&diff[..=i]).map(|(&a, &b)| a * b).sum();
            total += z * z;
        }
        total
    }
}

fn invert_lower<T: Scalar>(l: &[T], n: usize) -> Vec<T> {
    let mut inv = vec![T::zero(); n * n];
    for j in 0..n {
        inv[j * n + j] = T::one() / l[j * n + j];
        for i in (j + 1)..n {
            let mut s = T::zero();
            for k in j..i {
                s += l[i * n + k] * inv[k * n + j];
            }
            inv[i * n + j] = -s / l[i * n + i];
        }
    }
    inv
}

/// Relative jitter applied on the first repair attempt.
pub const JITTER_START: f64 = 1e-8;
/// Number of jittered retries after the plain factorization fails.
pub const JITTER_RETRIES: usize = 3;

/// Outcome of [`factor_with_repair`].
#[derive(Clone, Debug)]
pub struct Repaired<T> {
    pub factor: CholeskyFactor<T>,
    /// Covariance actually factored (input plus any diagonal jitter).
    pub covariance: Matrix<T>,
    /// Diagonal amount added, zero if none.
    pub jitter: T,
}

/// Symmetrizes `cov` then factors it, adding ε·tr(P)/M·I with ε = 1e-8, 1e-7,
/// 1e-6 on successive failures. A zero-trace matrix uses a unit scale.
pub fn factor_with_repair<T: Scalar>(mut cov: Matrix<T>) -> Result<Repaired<T>> {
    cov.symmetrize();
    if let Some(factor) = CholeskyFactor::new(&cov) {
        return Ok(Repaired {
            factor,
            covariance: cov,
            jitter: T::zero(),
        });
    }
    let n = cov.rows();
    let mean_diag = cov.trace() / T::from_usize_lossy(n.max(1));
    let scale = if mean_diag > T::zero() && mean_diag.is_finite() {
        mean_diag
    } else {
        T::one()
    };
    let mut eps = T::lit(JITTER_START);
    for _ in 0..JITTER_RETRIES {
        let jitter = eps * scale;
        let mut trial = cov.clone();
        for i in 0..n {
            let v = trial.get(i, i) + jitter;
            trial.set(i, i, v);
        }
        if let Some(factor) = CholeskyFactor::new(&trial) {
            return Ok(Repaired {
                factor,
                covariance: trial,
                jitter,
            });
        }
        eps *= T::lit(10.0);
    }
    Err(Error::NotPositiveDefinite)
}
