//! Ensembles, Gaussian measures, forward operators and the sample
//! statistics that every solver in the crate is built from.
//!
//! Covariances use the 1/N normalization throughout, not the unbiased
//! 1/(N-1) form common in filtering codes.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{EnkiError, ForwardError, Result};
use crate::linalg::{check_dims, sym_sqrt, symmetrize};

/// An n x N collection of particles, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    particles: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(particles: DMatrix<f64>) -> Result<Self> {
        if particles.nrows() == 0 || particles.ncols() == 0 {
            return Err(EnkiError::EmptyEnsemble);
        }
        if particles.iter().any(|x| !x.is_finite()) {
            return Err(EnkiError::NonFinite("ensemble"));
        }
        Ok(Self { particles })
    }

    pub fn from_columns(cols: &[DVector<f64>]) -> Result<Self> {
        if cols.is_empty() {
            return Err(EnkiError::EmptyEnsemble);
        }
        Self::new(DMatrix::from_columns(cols))
    }

    pub fn particles(&self) -> &DMatrix<f64> {
        &self.particles
    }

    pub fn into_particles(self) -> DMatrix<f64> {
        self.particles
    }

    /// Parameter dimension n.
    pub fn dim(&self) -> usize {
        self.particles.nrows()
    }

    /// Ensemble size N.
    pub fn size(&self) -> usize {
        self.particles.ncols()
    }

    pub fn mean(&self) -> DVector<f64> {
        column_mean(&self.particles)
    }

    /// Particles minus their mean.
    pub fn deviations(&self) -> DMatrix<f64> {
        centered(&self.particles).1
    }

    /// D / sqrt(N), so that `F * F^T` is the sample covariance.
    pub fn covariance_factor(&self) -> DMatrix<f64> {
        self.deviations() / (self.size() as f64).sqrt()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let dev = self.deviations();
        let mut c = &dev * dev.transpose() / self.size() as f64;
        symmetrize(&mut c);
        c
    }
}

pub fn sample_mean(e: &Ensemble) -> DVector<f64> {
    e.mean()
}

pub fn sample_covariance(e: &Ensemble) -> DMatrix<f64> {
    e.covariance()
}

// Shifted by the first column so identical particles give their exact value.
fn column_mean(m: &DMatrix<f64>) -> DVector<f64> {
    let first = m.column(0).into_owned();
    let mut acc = DVector::zeros(m.nrows());
    for col in m.column_iter().skip(1) {
        acc += col - &first;
    }
    first + acc / m.ncols() as f64
}

fn centered(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mean = column_mean(m);
    let mut dev = m.clone();
    for mut col in dev.column_iter_mut() {
        col -= &mean;
    }
    (mean, dev)
}

/// Fills an r x c matrix with i.i.d. standard normals in column-major order.
pub fn standard_normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    DMatrix::from_vec(rows, cols, data)
}

/// Gaussian measure N(mean, cov) with an optional explicit factor F, F F^T = cov.
#[derive(Debug, Clone)]
pub struct GaussianMeasure {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl GaussianMeasure {
    /// Validates symmetry and positive semidefiniteness; the factor is the
    /// symmetric square root.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::validate(&mean, &cov)?;
        let factor = sym_sqrt(&cov);
        Ok(Self { mean, cov, factor })
    }

    pub fn with_factor(mean: DVector<f64>, cov: DMatrix<f64>, factor: DMatrix<f64>) -> Result<Self> {
        Self::validate(&mean, &cov)?;
        check_dims("covariance factor rows", (factor.nrows(), 1), (mean.len(), 1))?;
        Ok(Self { mean, cov, factor })
    }

    fn validate(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<()> {
        let n = mean.len();
        check_dims("covariance", cov.shape(), (n, n))?;
        if cov.iter().chain(mean.iter()).any(|x| !x.is_finite()) {
            return Err(EnkiError::NonFinite("gaussian measure"));
        }
        let scale = cov.abs().max().max(f64::MIN_POSITIVE);
        if (cov - cov.transpose()).abs().max() > 1e-12 * scale {
            return Err(EnkiError::InvalidParameter("covariance is not symmetric".into()));
        }
        let (lo, _) = crate::linalg::sym_eig_extremes(cov);
        if lo < -1e-10 * cov.norm() {
            return Err(EnkiError::NotPositiveDefinite("covariance has negative eigenvalues"));
        }
        Ok(())
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `count` independent draws as columns.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> DMatrix<f64> {
        let z = standard_normal_matrix(rng, self.factor.ncols(), count);
        let mut out = &self.factor * z;
        for mut col in out.column_iter_mut() {
            col += &self.mean;
        }
        out
    }

    pub fn sample_ensemble<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Ensemble> {
        Ensemble::new(self.sample(rng, count))
    }
}

/// Observation noise with covariance mu * I.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub mu: f64,
    pub m: usize,
}

impl NoiseModel {
    pub fn new(mu: f64, m: usize) -> Result<Self> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(EnkiError::InvalidParameter(format!("noise variance mu must be positive, got {mu}")));
        }
        Ok(Self { mu, m })
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::identity(self.m, self.m) * self.mu
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub d: DVector<f64>,
    pub truth: Option<DVector<f64>>,
}

impl Observation {
    pub fn new(d: DVector<f64>) -> Self {
        Self { d, truth: None }
    }

    pub fn with_truth(d: DVector<f64>, truth: DVector<f64>) -> Self {
        Self { d, truth: Some(truth) }
    }

    pub fn m(&self) -> usize {
        self.d.len()
    }
}

/// A map u -> G(u). Implementations must be deterministic and free of side
/// effects so that ensembles can be evaluated in parallel.
pub trait ForwardOperator: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, u: &DVector<f64>) -> std::result::Result<DVector<f64>, ForwardError>;

    /// The matrix for linear operators.
    fn matrix(&self) -> Option<&DMatrix<f64>> {
        None
    }

    fn is_linear(&self) -> bool {
        self.matrix().is_some()
    }
}

#[derive(Debug, Clone)]
pub struct LinearOperator {
    a: DMatrix<f64>,
}

impl LinearOperator {
    pub fn new(a: DMatrix<f64>) -> Self {
        Self { a }
    }
}

impl ForwardOperator for LinearOperator {
    fn input_dim(&self) -> usize {
        self.a.ncols()
    }

    fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    fn apply(&self, u: &DVector<f64>) -> std::result::Result<DVector<f64>, ForwardError> {
        Ok(&self.a * u)
    }

    fn matrix(&self) -> Option<&DMatrix<f64>> {
        Some(&self.a)
    }
}

/// G applied to every particle, as an m x N matrix.
pub fn evaluate_ensemble(e: &Ensemble, g: &dyn ForwardOperator) -> Result<DMatrix<f64>> {
    check_dims("forward input", (e.dim(), 1), (g.input_dim(), 1))?;
    if let Some(a) = g.matrix() {
        return Ok(a * e.particles());
    }
    let cols: Vec<DVector<f64>> = (0..e.size())
        .into_par_iter()
        .map(|i| {
            g.apply(&e.particles().column(i).into_owned())
                .map_err(|source| EnkiError::Forward { particle: i, source })
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_columns(&cols))
}

/// Second-order statistics of an ensemble and its forward image. Deviation
/// factors are kept so callers can form products without n x n matrices.
#[derive(Debug, Clone)]
pub struct ForwardStats {
    /// G(u^(i)) as columns, m x N.
    pub images: DMatrix<f64>,
    pub g_mean: DVector<f64>,
    /// Parameter deviations, n x N (not scaled by 1/sqrt(N)).
    pub dev_u: DMatrix<f64>,
    /// Output deviations, m x N.
    pub dev_g: DMatrix<f64>,
    pub c_up: DMatrix<f64>,
    pub c_pp: DMatrix<f64>,
}

impl ForwardStats {
    pub fn from_images(e: &Ensemble, images: DMatrix<f64>) -> Result<Self> {
        check_dims("forward images", (images.ncols(), 1), (e.size(), 1))?;
        let n_inv = 1.0 / e.size() as f64;
        let dev_u = e.deviations();
        let (g_mean, dev_g) = centered(&images);
        let c_up = &dev_u * dev_g.transpose() * n_inv;
        let mut c_pp = &dev_g * dev_g.transpose() * n_inv;
        symmetrize(&mut c_pp);
        Ok(Self { images, g_mean, dev_u, dev_g, c_up, c_pp })
    }

    pub fn size(&self) -> usize {
        self.images.ncols()
    }

    /// d - G(u^(i)) for every particle.
    pub fn residuals(&self, d: &DVector<f64>) -> DMatrix<f64> {
        let mut r = -self.images.clone();
        for mut col in r.column_iter_mut() {
            col += d;
        }
        r
    }
}

pub fn ensemble_forward_stats(e: &Ensemble, g: &dyn ForwardOperator) -> Result<ForwardStats> {
    let images = evaluate_ensemble(e, g)?;
    ForwardStats::from_images(e, images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(seed: u64, r: usize, c: usize) -> DMatrix<f64> {
        standard_normal_matrix(&mut ChaCha8Rng::seed_from_u64(seed), r, c)
    }

    #[test]
    fn empty_is_rejected() {
        assert_eq!(Ensemble::new(DMatrix::zeros(3, 0)), Err(EnkiError::EmptyEnsemble));
        assert_eq!(Ensemble::from_columns(&[]), Err(EnkiError::EmptyEnsemble));
    }

    #[test]
    fn mean_of_single_and_symmetric_pair() {
        let v = DVector::from_vec(vec![1.5, -2.0, 3.0]);
        assert_eq!(Ensemble::from_columns(&[v.clone()]).unwrap().mean(), v);
        let e = Ensemble::from_columns(&[v.clone(), -v]).unwrap();
        assert_eq!(e.mean(), DVector::zeros(3));
    }

    #[test]
    fn mean_matches_loop_sum() {
        let p = random_matrix(1, 4, 7);
        let e = Ensemble::new(p.clone()).unwrap();
        let mean = e.mean();
        for i in 0..4 {
            let mut s = 0.0;
            for j in 0..7 {
                s += p[(i, j)];
            }
            assert!((mean[i] - s / 7.0).abs() < 1e-14);
        }
    }

    #[test]
    fn covariance_hand_cases() {
        let e = Ensemble::new(DMatrix::from_row_slice(1, 2, &[1.0, -1.0])).unwrap();
        assert_eq!(e.covariance()[(0, 0)], 1.0);
        let v = DVector::from_vec(vec![0.3, 0.7]);
        let collapsed = Ensemble::from_columns(&[v.clone(), v.clone(), v]).unwrap();
        assert_eq!(collapsed.covariance(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn covariance_matches_double_loop() {
        let p = random_matrix(2, 5, 8);
        let e = Ensemble::new(p.clone()).unwrap();
        let c = e.covariance();
        let mean = e.mean();
        for a in 0..5 {
            for b in 0..5 {
                let mut s = 0.0;
                for i in 0..8 {
                    s += (p[(a, i)] - mean[a]) * (p[(b, i)] - mean[b]);
                }
                assert!((c[(a, b)] - s / 8.0).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn linear_stats_match_covariance_products() {
        let e = Ensemble::new(random_matrix(3, 6, 4)).unwrap();
        let a = random_matrix(4, 3, 6);
        let stats = ensemble_forward_stats(&e, &LinearOperator::new(a.clone())).unwrap();
        let c = e.covariance();
        assert!((&stats.c_up - &c * a.transpose()).abs().max() < 1e-12);
        assert!((&stats.c_pp - &a * &c * a.transpose()).abs().max() < 1e-12);
    }

    struct Quadratic;
    impl ForwardOperator for Quadratic {
        fn input_dim(&self) -> usize {
            2
        }
        fn output_dim(&self) -> usize {
            3
        }
        fn apply(&self, u: &DVector<f64>) -> std::result::Result<DVector<f64>, ForwardError> {
            Ok(DVector::from_vec(vec![u[0] * u[0], u[0] * u[1], u[1] - u[1] * u[1]]))
        }
    }

    #[test]
    fn quadratic_stats_match_loop() {
        let p = random_matrix(5, 2, 4);
        let e = Ensemble::new(p.clone()).unwrap();
        let stats = ensemble_forward_stats(&e, &Quadratic).unwrap();
        let g: Vec<DVector<f64>> = (0..4).map(|i| Quadratic.apply(&p.column(i).into_owned()).unwrap()).collect();
        let gbar = g.iter().fold(DVector::zeros(3), |acc, x| acc + x) / 4.0;
        let ubar = e.mean();
        let mut cup = DMatrix::zeros(2, 3);
        let mut cpp = DMatrix::zeros(3, 3);
        for i in 0..4 {
            let du = p.column(i) - &ubar;
            let dg = &g[i] - &gbar;
            cup += &du * dg.transpose() / 4.0;
            cpp += &dg * dg.transpose() / 4.0;
        }
        assert!((&stats.c_up - cup).abs().max() < 1e-14);
        assert!((&stats.c_pp - cpp).abs().max() < 1e-14);
        assert!((&stats.g_mean - gbar).abs().max() < 1e-15);
    }

    struct FailsOnNegative;
    impl ForwardOperator for FailsOnNegative {
        fn input_dim(&self) -> usize {
            1
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn apply(&self, u: &DVector<f64>) -> std::result::Result<DVector<f64>, ForwardError> {
            if u[0] < 0.0 {
                Err(ForwardError::NonFiniteInput)
            } else {
                Ok(u.clone())
            }
        }
    }

    #[test]
    fn forward_failure_names_particle() {
        let e = Ensemble::new(DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0])).unwrap();
        match ensemble_forward_stats(&e, &FailsOnNegative) {
            Err(EnkiError::Forward { particle, .. }) => assert_eq!(particle, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn collapsed_stats_vanish() {
        let v = DVector::from_vec(vec![1.0, -0.5]);
        let e = Ensemble::from_columns(&[v.clone(), v]).unwrap();
        let stats = ensemble_forward_stats(&e, &Quadratic).unwrap();
        assert_eq!(stats.c_up.abs().max(), 0.0);
        assert_eq!(stats.c_pp.abs().max(), 0.0);
    }

    #[test]
    fn measure_rejects_asymmetric() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(GaussianMeasure::new(DVector::zeros(2), c).is_err());
    }

    #[test]
    fn noise_requires_positive_mu() {
        assert!(NoiseModel::new(0.0, 3).is_err());
        assert!(NoiseModel::new(0.01, 3).is_ok());
    }
}
