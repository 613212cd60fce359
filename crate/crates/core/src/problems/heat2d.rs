//! Steady heat equation div(e^u grad p) = f on the unit square with p = 0
//! on the boundary, discretized by the 5-point stencil. The SPD system is
//! banded (half-bandwidth s) and solved by a banded Cholesky factorization.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::Grid2D;
use crate::ensemble::{standard_normal_matrix, ForwardOperator};
use crate::error::{EnkiError, ForwardError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FaceMean {
    #[default]
    Arithmetic,
    Harmonic,
}

impl FaceMean {
    fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            FaceMean::Arithmetic => 0.5 * (a + b),
            FaceMean::Harmonic => 2.0 * a * b / (a + b),
        }
    }
}

/// Lower band of a symmetric matrix: `band[(p, k)]` holds entry (p, p - k).
#[derive(Debug, Clone)]
pub struct BandedSpd {
    pub n: usize,
    pub bw: usize,
    band: DMatrix<f64>,
}

impl BandedSpd {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self { n, bw, band: DMatrix::zeros(n, bw + 1) }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        if hi - lo > self.bw {
            0.0
        } else {
            self.band[(hi, hi - lo)]
        }
    }

    /// Sets entry (i, j) for i >= j.
    pub fn set_lower(&mut self, i: usize, j: usize, v: f64) {
        self.band[(i, i - j)] = v;
    }

    pub fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            y[i] += self.band[(i, 0)] * x[i];
            for k in 1..=self.bw.min(i) {
                let a = self.band[(i, k)];
                if a != 0.0 {
                    y[i] += a * x[i - k];
                    y[i - k] += a * x[i];
                }
            }
        }
        y
    }

    /// In-place banded Cholesky; None if a pivot is not positive.
    pub fn factor(&self) -> Option<BandedCholesky> {
        let (n, bw) = (self.n, self.bw);
        let mut l = self.band.clone();
        for i in 0..n {
            let jlo = i.saturating_sub(bw);
            for j in jlo..=i {
                let mut sum = l[(i, i - j)];
                let plo = jlo.max(j.saturating_sub(bw));
                for p in plo..j {
                    sum -= l[(i, i - p)] * l[(j, j - p)];
                }
                if i == j {
                    if !(sum > 0.0) {
                        return None;
                    }
                    l[(i, 0)] = sum.sqrt();
                } else {
                    l[(i, i - j)] = sum / l[(j, 0)];
                }
            }
        }
        Some(BandedCholesky { n, bw, l })
    }
}

#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    l: DMatrix<f64>,
}

impl BandedCholesky {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let (n, bw) = (self.n, self.bw);
        let mut y = b.clone();
        for i in 0..n {
            let mut s = y[i];
            for p in i.saturating_sub(bw)..i {
                s -= self.l[(i, i - p)] * y[p];
            }
            y[i] = s / self.l[(i, 0)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for q in (i + 1)..(i + bw + 1).min(n) {
                s -= self.l[(q, q - i)] * y[q];
            }
            y[i] = s / self.l[(i, 0)];
        }
        y
    }
}

/// The SPD matrix of -div(kappa grad .) with kappa = e^u at the nodes.
/// Faces on the boundary use the conductivity of the adjacent interior node.
pub fn assemble(grid: &Grid2D, u: &DVector<f64>, mean: FaceMean) -> BandedSpd {
    let s = grid.s;
    let inv_h2 = 1.0 / (grid.h() * grid.h());
    let kappa: Vec<f64> = u.iter().map(|x| x.exp()).collect();
    let mut a = BandedSpd::zeros(grid.len(), s);
    for j in 0..s {
        for i in 0..s {
            let p = grid.index(i, j);
            let kp = kappa[p];
            let mut diag = 0.0;
            let neighbours = [
                (i > 0).then(|| grid.index(i - 1, j)),
                (i + 1 < s).then(|| grid.index(i + 1, j)),
                (j > 0).then(|| grid.index(i, j - 1)),
                (j + 1 < s).then(|| grid.index(i, j + 1)),
            ];
            for q in neighbours {
                match q {
                    Some(q) => {
                        let kf = mean.combine(kp, kappa[q]) * inv_h2;
                        diag += kf;
                        if q < p {
                            a.set_lower(p, q, -kf);
                        }
                    }
                    None => diag += kp * inv_h2,
                }
            }
            a.set_lower(p, p, diag);
        }
    }
    a
}

#[derive(Debug, Clone)]
pub struct Heat2d {
    pub grid: Grid2D,
    pub source: f64,
    pub obs_indices: Vec<usize>,
    pub face_mean: FaceMean,
}

impl Heat2d {
    pub fn new(grid: Grid2D, obs_indices: Vec<usize>) -> Result<Self> {
        if let Some(bad) = obs_indices.iter().find(|i| **i >= grid.len()) {
            return Err(EnkiError::InvalidParameter(format!("heat observation index {bad} out of range")));
        }
        Ok(Self { grid, source: 1.0, obs_indices, face_mean: FaceMean::Arithmetic })
    }

    /// Interior temperatures for log-conductivity `u`.
    pub fn solve(&self, u: &DVector<f64>) -> std::result::Result<DVector<f64>, ForwardError> {
        if u.iter().any(|x| !x.is_finite()) {
            return Err(ForwardError::NonFiniteInput);
        }
        let a = assemble(&self.grid, u, self.face_mean);
        let rhs = DVector::from_element(self.grid.len(), -self.source);
        let chol = a.factor().ok_or(ForwardError::Solver { residual: f64::NAN })?;
        let p = chol.solve(&rhs);
        let residual = (a.mul(&p) - &rhs).norm() / rhs.norm().max(f64::MIN_POSITIVE);
        if !(residual <= 1e-10) {
            return Err(ForwardError::Solver { residual });
        }
        Ok(p)
    }
}

impl ForwardOperator for Heat2d {
    fn input_dim(&self) -> usize {
        self.grid.len()
    }

    fn output_dim(&self) -> usize {
        self.obs_indices.len()
    }

    fn apply(&self, u: &DVector<f64>) -> std::result::Result<DVector<f64>, ForwardError> {
        let p = self.solve(u)?;
        Ok(DVector::from_iterator(self.obs_indices.len(), self.obs_indices.iter().map(|&i| p[i])))
    }
}

/// Prior with covariance scale^2 * Delta^-2 (Dirichlet Laplacian), sampled
/// as v = scale * L^-1 w with w white and L = -Delta.
#[derive(Debug, Clone)]
pub struct LaplacianSqPrior {
    pub grid: Grid2D,
    pub scale: f64,
    chol: BandedCholesky,
}

impl LaplacianSqPrior {
    pub fn new(grid: Grid2D, scale: f64) -> Self {
        let lap = assemble(&grid, &DVector::zeros(grid.len()), FaceMean::Arithmetic);
        let chol = lap.factor().expect("Dirichlet Laplacian is SPD");
        Self { grid, scale, chol }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> DMatrix<f64> {
        let w = standard_normal_matrix(rng, self.grid.len(), count);
        let cols: Vec<DVector<f64>> =
            w.column_iter().map(|c| self.chol.solve(&c.into_owned()) * self.scale).collect();
        DMatrix::from_columns(&cols)
    }

    /// Dense covariance; only for small grids.
    pub fn covariance_dense(&self) -> DMatrix<f64> {
        let n = self.grid.len();
        let inv = DMatrix::from_columns(
            &(0..n).map(|i| self.chol.solve(&DVector::from_fn(n, |k, _| f64::from(k == i)))).collect::<Vec<_>>(),
        );
        &inv * &inv * (self.scale * self.scale)
    }
}

pub fn laplacian_sq_prior(grid: Grid2D) -> LaplacianSqPrior {
    LaplacianSqPrior::new(grid, 1.0)
}
