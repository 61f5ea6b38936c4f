//! Uniform grids on the unit box, the finite-difference diffusion operator
//! `-div(k grad)` with homogeneous Dirichlet data, and grid quadrature.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::sparse::CsrMatrix;

/// Interior nodes of a uniform grid on `(0,1)^dim`, numbered
/// lexicographically with the first axis fastest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dim: usize,
    n: usize,
    h: f64,
}

impl Grid {
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::Config(format!(
                "grid dimension must be 1 or 2, got {dim}"
            )));
        }
        if n < 2 {
            return Err(Error::Config(format!(
                "need at least 2 interior nodes per axis, got {n}"
            )));
        }
        Ok(Self {
            dim,
            n,
            h: 1.0 / (n + 1) as f64,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Interior nodes per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn node_count(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    /// Weight of one node in the discrete L2 inner product, `h^dim`.
    pub fn quad_weight(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    /// Flat index of the interior multi-index `idx` (0-based per axis).
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dim);
        idx.iter().rev().fold(0, |acc, &i| acc * self.n + i)
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let mut rest = flat;
        (0..self.dim)
            .map(|_| {
                let i = rest % self.n;
                rest /= self.n;
                i
            })
            .collect()
    }

    /// Physical coordinates of an interior node.
    pub fn coords(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .into_iter()
            .map(|i| (i + 1) as f64 * self.h)
            .collect()
    }

    /// Nearest interior node to `x`, with the Euclidean snap distance.
    pub fn snap(&self, x: &[f64]) -> Result<(usize, f64)> {
        check_len("observation coordinate", self.dim, x.len())?;
        if x.iter().any(|&c| !(c > 0.0 && c < 1.0)) {
            return Err(Error::Config(format!(
                "observation point {x:?} is not inside the open unit box"
            )));
        }
        let idx: Vec<usize> = x
            .iter()
            .map(|&c| {
                let i = (c / self.h).round() as isize - 1;
                i.clamp(0, self.n as isize - 1) as usize
            })
            .collect();
        let flat = self.flat_index(&idx);
        let dist = self
            .coords(flat)
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        Ok((flat, dist))
    }

    /// Samples `f` at every interior node.
    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.node_count()).map(|j| f(&self.coords(j))).collect()
    }

    /// Discrete L2 pairing `h^dim * sum v_j w_j`.
    pub fn inner_product(&self, v: &[f64], w: &[f64]) -> Result<f64> {
        check_len("inner product", self.node_count(), v.len())?;
        check_len("inner product", self.node_count(), w.len())?;
        Ok(self.ip(v, w))
    }

    pub(crate) fn ip(&self, v: &[f64], w: &[f64]) -> f64 {
        self.quad_weight() * v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn l2_norm(&self, v: &[f64]) -> f64 {
        self.ip(v, v).sqrt()
    }

    /// `h^dim * sum |v_j|^beta`, the grid version of the integral of `|v|^beta`.
    pub fn lp_integral(&self, v: &[f64], beta: f64) -> Result<f64> {
        if !(beta >= 2.0) {
            return Err(Error::Config(format!(
                "exponent beta must be >= 2, got {beta}"
            )));
        }
        check_len("lp integral", self.node_count(), v.len())?;
        Ok(self.quad_weight() * v.iter().map(|x| x.abs().powf(beta)).sum::<f64>())
    }

    pub fn lp_norm(&self, v: &[f64], beta: f64) -> Result<f64> {
        Ok(self.lp_integral(v, beta)?.powf(1.0 / beta))
    }

    /// Number of lattice points per axis including the two boundary nodes.
    pub(crate) fn lattice_n(&self) -> usize {
        self.n + 2
    }

    pub(crate) fn lattice_count(&self) -> usize {
        self.lattice_n().pow(self.dim as u32)
    }
}

/// Scalar diffusion coefficient, piecewise constant on the dual cells around
/// every lattice point (boundary points included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiffusionField {
    Constant {
        value: f64,
    },
    /// One value per lattice point, `(n+2)^dim` in lexicographic order.
    Nodal {
        values: Vec<f64>,
    },
}

impl Default for DiffusionField {
    fn default() -> Self {
        DiffusionField::Constant { value: 1.0 }
    }
}

impl DiffusionField {
    pub fn constant(value: f64) -> Self {
        DiffusionField::Constant { value }
    }

    /// Evaluates `k` at every lattice point, boundary included.
    pub fn from_fn(grid: &Grid, k: impl Fn(&[f64]) -> f64) -> Self {
        let m = grid.lattice_n();
        let values = (0..grid.lattice_count())
            .map(|flat| {
                let x: Vec<f64> = lattice_multi_index(flat, m, grid.dim())
                    .into_iter()
                    .map(|i| i as f64 * grid.h())
                    .collect();
                k(&x)
            })
            .collect();
        DiffusionField::Nodal { values }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        match self {
            DiffusionField::Constant { value } => {
                if !(*value > 0.0) || !value.is_finite() {
                    return Err(Error::Ellipticity {
                        index: 0,
                        value: *value,
                    });
                }
            }
            DiffusionField::Nodal { values } => {
                check_len("diffusion field", grid.lattice_count(), values.len())?;
                if let Some((index, &value)) = values
                    .iter()
                    .enumerate()
                    .find(|(_, v)| !(**v > 0.0) || !v.is_finite())
                {
                    return Err(Error::Ellipticity { index, value });
                }
            }
        }
        Ok(())
    }

    /// Smallest coefficient value, the uniform ellipticity constant.
    pub fn k_min(&self) -> f64 {
        match self {
            DiffusionField::Constant { value } => *value,
            DiffusionField::Nodal { values } => {
                values.iter().copied().fold(f64::INFINITY, f64::min)
            }
        }
    }

    fn at_lattice(&self, flat: usize) -> f64 {
        match self {
            DiffusionField::Constant { value } => *value,
            DiffusionField::Nodal { values } => values[flat],
        }
    }
}

fn lattice_multi_index(flat: usize, m: usize, dim: usize) -> Vec<usize> {
    let mut rest = flat;
    (0..dim)
        .map(|_| {
            let i = rest % m;
            rest /= m;
            i
        })
        .collect()
}

fn lattice_flat(idx: &[usize], m: usize) -> usize {
    idx.iter().rev().fold(0, |acc, &i| acc * m + i)
}

fn harmonic_mean(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Sparse SPD matrix for `-div(k grad)` on the interior nodes.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    grid: Grid,
    matrix: CsrMatrix,
}

impl DiscreteOperator {
    /// 3-point (1D) or 5-point (2D) stencil; face coefficients are the
    /// harmonic mean of the two adjacent lattice values.
    pub fn assemble(grid: &Grid, k: &DiffusionField) -> Result<Self> {
        k.validate(grid)?;
        let m = grid.lattice_n();
        let inv_h2 = 1.0 / (grid.h() * grid.h());
        let rows = (0..grid.node_count())
            .map(|row| {
                let interior = grid.multi_index(row);
                let lat: Vec<usize> = interior.iter().map(|i| i + 1).collect();
                let k_here = k.at_lattice(lattice_flat(&lat, m));
                let mut entries = Vec::with_capacity(2 * grid.dim() + 1);
                let mut diag = 0.0;
                for axis in 0..grid.dim() {
                    for step in [-1isize, 1] {
                        let mut nb = lat.clone();
                        nb[axis] = (nb[axis] as isize + step) as usize;
                        let face =
                            harmonic_mean(k_here, k.at_lattice(lattice_flat(&nb, m))) * inv_h2;
                        diag += face;
                        // lattice indices 0 and n+1 are boundary nodes
                        if nb[axis] >= 1 && nb[axis] <= grid.n() {
                            let nb_interior: Vec<usize> = nb.iter().map(|i| i - 1).collect();
                            entries.push((grid.flat_index(&nb_interior), -face));
                        }
                    }
                }
                entries.push((row, diag));
                entries
            })
            .collect();
        Ok(Self {
            grid: *grid,
            matrix: CsrMatrix::from_rows(grid.node_count(), rows),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.matrix.mul_vec(v)
    }

    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        self.matrix.transpose_mul_vec(v)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        self.matrix.to_dense()
    }
}
