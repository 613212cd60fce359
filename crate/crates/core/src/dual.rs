//! Single-step solvers for the linear-Gaussian problem: the MAP point by the
//! primal normal equations and by the dual multiplier, the sample-average
//! dual, and the perturbed-observation EnKF update built on it.
//!
//! Every inverse of the form (Sigma + A S A^T)^-1 is applied through a
//! Cholesky factorization of the m x m matrix.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::ensemble::{standard_normal_matrix, GaussianMeasure};
use crate::error::{EnkiError, Result};
use crate::linalg::{check_dims, cholesky, inf_norm, sym_sqrt, symmetrize};

#[derive(Debug, Clone)]
pub struct LinearProblem {
    pub a: DMatrix<f64>,
    pub prior: GaussianMeasure,
    pub sigma: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl LinearProblem {
    pub fn new(a: DMatrix<f64>, prior: GaussianMeasure, sigma: DMatrix<f64>, d: DVector<f64>) -> Result<Self> {
        let (m, n) = a.shape();
        check_dims("prior dimension", (prior.dim(), 1), (n, 1))?;
        check_dims("noise covariance", sigma.shape(), (m, m))?;
        check_dims("data", (d.len(), 1), (m, 1))?;
        cholesky(&sigma, "noise covariance")?;
        Ok(Self { a, prior, sigma, d })
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn u0(&self) -> &DVector<f64> {
        self.prior.mean()
    }

    pub fn c(&self) -> &DMatrix<f64> {
        self.prior.cov()
    }

    /// B = Sigma + A C A^T
    pub fn dual_matrix(&self) -> DMatrix<f64> {
        let mut b = &self.sigma + &self.a * self.c() * self.a.transpose();
        symmetrize(&mut b);
        b
    }

    /// A u0 - d
    pub fn dual_rhs(&self) -> DVector<f64> {
        &self.a * self.u0() - &self.d
    }
}

/// MAP point from (A^T S^-1 A + C^-1)^-1 (A^T S^-1 d + C^-1 u0). Needs an
/// invertible prior covariance.
pub fn solve_map_primal(p: &LinearProblem) -> Result<DVector<f64>> {
    let c_chol = cholesky(p.c(), "prior covariance").map_err(|_| EnkiError::SingularPrior)?;
    let s_chol = cholesky(&p.sigma, "noise covariance")?;
    let c_inv = c_chol.inverse();
    let s_inv_a = s_chol.solve(&p.a);
    let mut h = p.a.transpose() * &s_inv_a + &c_inv;
    symmetrize(&mut h);
    let rhs = p.a.transpose() * s_chol.solve(&p.d) + &c_inv * p.u0();
    let h_chol = cholesky(&h, "primal normal matrix")?;
    Ok(h_chol.solve(&rhs))
}

/// lambda* solving (Sigma + A C A^T) lambda = A u0 - d.
pub fn solve_dual_lambda(p: &LinearProblem) -> Result<DVector<f64>> {
    let b = p.dual_matrix();
    let rhs = p.dual_rhs();
    let chol = cholesky(&b, "dual matrix")?;
    let lambda = chol.solve(&rhs);
    let residual = (&b * &lambda - &rhs).norm();
    if residual > 1e-10 * rhs.norm() {
        let condition = inf_norm(&b) * inf_norm(&chol.inverse());
        return Err(EnkiError::DualSolve { residual, condition });
    }
    Ok(lambda)
}

/// u* = u0 - C A^T lambda
pub fn map_from_dual(p: &LinearProblem, lambda: &DVector<f64>) -> DVector<f64> {
    p.u0() - p.c() * (p.a.transpose() * lambda)
}

/// MAP point through the dual route; works for rank-deficient C.
pub fn solve_map_dual(p: &LinearProblem) -> Result<DVector<f64>> {
    Ok(map_from_dual(p, &solve_dual_lambda(p)?))
}

/// Perturbations delta^(i) ~ N(0, C), sigma^(i) ~ N(0, Sigma) and the scaled
/// factor Omega = [delta^(1) .. delta^(N)] / sqrt(N).
#[derive(Debug, Clone)]
pub struct PerturbationDraw {
    pub deltas: DMatrix<f64>,
    pub sigmas: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub delta_bar: DVector<f64>,
    pub sigma_bar: DVector<f64>,
}

impl PerturbationDraw {
    pub fn new(deltas: DMatrix<f64>, sigmas: DMatrix<f64>) -> Result<Self> {
        let big_n = deltas.ncols();
        if big_n == 0 {
            return Err(EnkiError::EmptyEnsemble);
        }
        check_dims("sigma draws", (sigmas.ncols(), 1), (big_n, 1))?;
        let omega = &deltas / (big_n as f64).sqrt();
        let delta_bar = mean_columns(&deltas);
        let sigma_bar = mean_columns(&sigmas);
        Ok(Self { deltas, sigmas, omega, delta_bar, sigma_bar })
    }

    /// Fresh draw given square-root factors of C and Sigma.
    pub fn sample<R: Rng + ?Sized>(
        c_sqrt: &DMatrix<f64>,
        sigma_sqrt: &DMatrix<f64>,
        big_n: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let z = standard_normal_matrix(rng, c_sqrt.ncols(), big_n);
        let w = standard_normal_matrix(rng, sigma_sqrt.ncols(), big_n);
        Self::new(c_sqrt * z, sigma_sqrt * w)
    }

    /// Draw for `p` using symmetric square roots of C and Sigma.
    pub fn sample_for<R: Rng + ?Sized>(p: &LinearProblem, big_n: usize, rng: &mut R) -> Result<Self> {
        Self::sample(&sym_sqrt(p.c()), &sym_sqrt(&p.sigma), big_n, rng)
    }

    /// Test utility: a draw with Omega Omega^T = C exactly and zero means.
    /// Omega = C^{1/2} Q where the rows of Q are orthonormal and orthogonal
    /// to the all-ones vector, which needs N > n.
    pub fn exact(c: &DMatrix<f64>, m: usize, big_n: usize) -> Result<Self> {
        let n = c.nrows();
        if big_n <= n {
            return Err(EnkiError::InvalidParameter(format!("exact draw needs N > n (N={big_n}, n={n})")));
        }
        // Columns of `basis` span the complement of 1 in R^N.
        let mut seed = DMatrix::<f64>::zeros(big_n, n + 1);
        for i in 0..big_n {
            seed[(i, 0)] = 1.0;
        }
        for j in 0..n {
            seed[(j, j + 1)] = 1.0;
            seed[(j + 1, j + 1)] = -1.0;
        }
        let q = seed.qr().q();
        let rows = q.columns(1, n).transpose();
        let omega = sym_sqrt(c) * rows;
        let deltas = &omega * (big_n as f64).sqrt();
        let mut draw = Self::new(deltas, DMatrix::zeros(m, big_n))?;
        draw.omega = omega;
        draw.delta_bar.fill(0.0);
        Ok(draw)
    }

    pub fn size(&self) -> usize {
        self.deltas.ncols()
    }
}

fn mean_columns(m: &DMatrix<f64>) -> DVector<f64> {
    let mut acc = DVector::zeros(m.nrows());
    for col in m.column_iter() {
        acc += col;
    }
    acc / m.ncols().max(1) as f64
}

fn saa_matrix(p: &LinearProblem, a_omega: &DMatrix<f64>) -> DMatrix<f64> {
    let mut b = &p.sigma + a_omega * a_omega.transpose();
    symmetrize(&mut b);
    b
}

/// lambda_bar* = (Sigma + A Omega Omega^T A^T)^-1 (A(u0 + delta_bar) - (d + sigma_bar))
pub fn saa_dual_solve(p: &LinearProblem, draw: &PerturbationDraw) -> Result<DVector<f64>> {
    check_dims("draw", draw.omega.shape(), (p.n(), draw.size()))?;
    let a_omega = &p.a * &draw.omega;
    let chol = cholesky(&saa_matrix(p, &a_omega), "SAA dual matrix")?;
    let rhs = &p.a * (p.u0() + &draw.delta_bar) - (&p.d + &draw.sigma_bar);
    Ok(chol.solve(&rhs))
}

/// u_hat* = u0 - C A^T lambda_bar*
pub fn induced_primal_saa(p: &LinearProblem, lambda_bar: &DVector<f64>) -> DVector<f64> {
    map_from_dual(p, lambda_bar)
}

#[derive(Debug, Clone)]
pub struct EnkfUpdate {
    pub particles: DMatrix<f64>,
    pub mean: DVector<f64>,
}

/// Per-particle update u^(i)* = u0 + delta^(i) + Omega (A Omega)^T B~^-1
/// (d + sigma^(i) - A(u0 + delta^(i))), sharing one factorization of B~.
pub fn enkf_update(p: &LinearProblem, draw: &PerturbationDraw) -> Result<EnkfUpdate> {
    check_dims("draw", draw.omega.shape(), (p.n(), draw.size()))?;
    check_dims("sigma draws", draw.sigmas.shape(), (p.m(), draw.size()))?;
    let a_omega = &p.a * &draw.omega;
    let chol = cholesky(&saa_matrix(p, &a_omega), "SAA dual matrix")?;

    let mut base = draw.deltas.clone();
    for mut col in base.column_iter_mut() {
        col += p.u0();
    }
    let mut innov = &draw.sigmas - &p.a * &base;
    for mut col in innov.column_iter_mut() {
        col += &p.d;
    }
    let w = chol.solve(&innov);
    let particles = base + &draw.omega * (a_omega.transpose() * w);
    let mean = mean_columns(&particles);
    Ok(EnkfUpdate { particles, mean })
}

/// Mean of the EnKF update written through the SAA multiplier,
/// u0 + delta_bar - Omega Omega^T A^T lambda_bar*. Avoids the per-particle
/// matrix when only the mean is needed.
pub fn enkf_mean(p: &LinearProblem, draw: &PerturbationDraw) -> Result<DVector<f64>> {
    let lambda_bar = saa_dual_solve(p, draw)?;
    let a_omega = &p.a * &draw.omega;
    Ok(p.u0() + &draw.delta_bar - &draw.omega * (a_omega.transpose() * lambda_bar))
}
