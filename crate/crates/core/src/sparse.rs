//! Sparse storage and the linear solvers used by the time steppers.
//!
//! The implicit Euler matrix `I + dt*A_h` is symmetric positive definite and
//! banded (bandwidth `n` in 2D under lexicographic ordering), so a banded
//! Cholesky factorization is exact and cheap at the sizes this crate targets.
//! Conjugate gradients is kept for grids where the band would be too large.

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from per-row `(column, value)` lists. Columns within a row are
    /// sorted and duplicates summed.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let nrows = rows.len();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                assert!(c < ncols, "column {c} out of range");
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_rows(n, (0..n).map(|i| vec![(i, 1.0)]).collect())
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|i| self.row(i).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn transpose_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut out = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            for (c, v) in self.row(i) {
                out[c] += v * xi;
            }
        }
        out
    }

    /// `alpha * I + beta * self`, for square matrices.
    pub fn shifted(&self, alpha: f64, beta: f64) -> Self {
        assert_eq!(self.nrows, self.ncols);
        let rows = (0..self.nrows)
            .map(|i| {
                let mut r: Vec<(usize, f64)> = self.row(i).map(|(c, v)| (c, beta * v)).collect();
                r.push((i, alpha));
                r
            })
            .collect();
        Self::from_rows(self.ncols, rows)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.nrows == self.ncols
            && (0..self.nrows).all(|i| {
                self.row(i)
                    .all(|(c, v)| (v - self.get(c, i)).abs() <= tol * v.abs().max(1.0))
            })
    }

    /// Largest `|i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.nrows)
            .flat_map(|i| self.row(i).map(move |(c, _)| i.abs_diff(c)))
            .max()
            .unwrap_or(0)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (c, v) in self.row(i) {
                m[(i, c)] += v;
            }
        }
        m
    }
}

/// Cholesky factor `L` of a symmetric positive definite band matrix, stored
/// row-wise as the `bw + 1` entries `L[i, i-bw..=i]`.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandedCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.nrows();
        let bw = a.bandwidth();
        let w = bw + 1;
        let mut band = vec![0.0; n * w];
        // band[i*w + (j + bw - i)] holds entry (i, j) for i-bw <= j <= i
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    band[i * w + (j + bw - i)] = v;
                }
            }
        }
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let k0 = j0.max(j.saturating_sub(bw));
                let mut s = band[i * w + (j + bw - i)];
                for k in k0..j {
                    s -= band[i * w + (k + bw - i)] * band[j * w + (k + bw - j)];
                }
                if j == i {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::Solver {
                            iterations: i,
                            residual: s,
                            reason: "matrix is not positive definite".into(),
                        });
                    }
                    band[i * w + bw] = s.sqrt();
                } else {
                    band[i * w + (j + bw - i)] = s / band[j * w + bw];
                }
            }
        }
        Ok(Self { n, bw, band })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        assert_eq!(b.len(), n);
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.band[i * w + (k + bw - i)] * x[k];
            }
            x[i] = s / self.band[i * w + bw];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n.min(i + bw + 1) {
                s -= self.band[k * w + (i + bw - k)] * x[k];
            }
            x[i] = s / self.band[i * w + bw];
        }
        x
    }
}

/// Jacobi-preconditioned conjugate gradients for SPD systems.
#[derive(Debug, Clone)]
pub struct ConjugateGradient {
    matrix: CsrMatrix,
    inv_diag: Vec<f64>,
    pub rel_tol: f64,
    pub max_iters: usize,
}

impl ConjugateGradient {
    pub fn new(matrix: CsrMatrix, rel_tol: f64, max_iters: usize) -> Self {
        let inv_diag = (0..matrix.nrows())
            .map(|i| 1.0 / matrix.get(i, i))
            .collect();
        Self {
            matrix,
            inv_diag,
            rel_tol,
            max_iters,
        }
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = b.len();
        let bnorm = norm2(b);
        let mut x = vec![0.0; n];
        if bnorm == 0.0 {
            return Ok(x);
        }
        let mut r = b.to_vec();
        let mut z: Vec<f64> = r.iter().zip(&self.inv_diag).map(|(a, d)| a * d).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        for it in 0..self.max_iters {
            let ap = self.matrix.mul_vec(&p);
            let alpha = rz / dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rnorm = norm2(&r);
            if rnorm <= self.rel_tol * bnorm {
                return Ok(x);
            }
            if !rnorm.is_finite() {
                return Err(Error::Solver {
                    iterations: it + 1,
                    residual: rnorm,
                    reason: "conjugate gradients broke down".into(),
                });
            }
            for i in 0..n {
                z[i] = r[i] * self.inv_diag[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        Err(Error::Solver {
            iterations: self.max_iters,
            residual: norm2(&r) / bnorm,
            reason: "conjugate gradients did not converge".into(),
        })
    }
}

/// Which backend factors `I + dt*A_h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Cholesky when the band fits in memory, CG otherwise.
    #[default]
    Auto,
    Cholesky,
    Cg,
}

/// Band storage above which `Auto` falls back to CG (number of doubles).
const BAND_STORAGE_LIMIT: usize = 1 << 26;

/// A factored SPD matrix `M`, applied as `M^{-1}` or `M^{-T}`.
#[derive(Debug, Clone)]
pub enum SpdSolver {
    Cholesky(BandedCholesky),
    Cg(ConjugateGradient),
}

impl SpdSolver {
    pub fn new(matrix: &CsrMatrix, kind: SolverKind) -> Result<Self> {
        let use_cg = match kind {
            SolverKind::Cg => true,
            SolverKind::Cholesky => false,
            SolverKind::Auto => matrix.nrows() * (matrix.bandwidth() + 1) > BAND_STORAGE_LIMIT,
        };
        if use_cg {
            Ok(SpdSolver::Cg(ConjugateGradient::new(
                matrix.clone(),
                1e-14,
                10 * matrix.nrows().max(100),
            )))
        } else {
            Ok(SpdSolver::Cholesky(BandedCholesky::factor(matrix)?))
        }
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        match self {
            SpdSolver::Cholesky(c) => Ok(c.solve(b)),
            SpdSolver::Cg(cg) => cg.solve(b),
        }
    }

    /// Solve with the transposed matrix. The stored matrices are symmetric,
    /// so this is the same solve.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.solve(b)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_1d(n: usize) -> CsrMatrix {
        let rows = (0..n)
            .map(|i| {
                let mut r = vec![(i, 2.0)];
                if i > 0 {
                    r.push((i - 1, -1.0));
                }
                if i + 1 < n {
                    r.push((i + 1, -1.0));
                }
                r
            })
            .collect();
        CsrMatrix::from_rows(n, rows)
    }

    #[test]
    fn csr_duplicates_are_summed() {
        let m = CsrMatrix::from_rows(2, vec![vec![(1, 1.0), (0, 2.0), (1, 3.0)], vec![]]);
        assert_eq!(m.get(0, 1), 4.0);
        assert_eq!(m.get(0, 0), 2.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn cholesky_solves_tridiagonal() {
        let a = laplace_1d(10).shifted(0.5, 1.0);
        let chol = BandedCholesky::factor(&a).unwrap();
        let x_true: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let b = a.mul_vec(&x_true);
        let x = chol.solve(&b);
        for (u, v) in x.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-13);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = laplace_1d(4).shifted(-3.0, 1.0);
        assert!(matches!(
            BandedCholesky::factor(&a),
            Err(Error::Solver { .. })
        ));
    }

    #[test]
    fn cg_matches_cholesky() {
        let a = laplace_1d(30).shifted(0.1, 1.0);
        let b: Vec<f64> = (0..30).map(|i| 1.0 + (i as f64 * 0.3).cos()).collect();
        let x1 = BandedCholesky::factor(&a).unwrap().solve(&b);
        let x2 = ConjugateGradient::new(a, 1e-14, 1000).solve(&b).unwrap();
        for (u, v) in x1.iter().zip(&x2) {
            assert!((u - v).abs() < 1e-10 * u.abs().max(1.0));
        }
    }

    #[test]
    fn cg_reports_non_convergence() {
        let a = laplace_1d(50);
        let b = vec![1.0; 50];
        let err = ConjugateGradient::new(a, 1e-14, 3).solve(&b).unwrap_err();
        assert!(matches!(err, Error::Solver { iterations: 3, .. }));
    }
}
