//! Ready-made inverse problems: forward map, synthetic data, and an initial
//! ensemble, all generated from one seed.
//!
//! Each seed drives independent ChaCha streams for the truth, the data noise,
//! the initial ensemble, and the observation locations, so changing the
//! ensemble size leaves the truth and data untouched.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::deconv::{deconv_operator, DEFAULT_HALF_WIDTH};
use super::heat2d::{Heat2d, LaplacianSqPrior};
use super::kernels::exp_sine_squared_cov;
use super::lorenz96::{L96Config, Lorenz96};
use super::noise::add_noise_with;
use super::{Grid1D, Grid2D};
use crate::ensemble::{standard_normal_matrix, Ensemble, ForwardOperator, GaussianMeasure, LinearOperator, Observation};
use crate::dual::LinearProblem;
use crate::error::{EnkiError, Result};

const STREAM_TRUTH: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_ENSEMBLE: u64 = 2;
const STREAM_LAYOUT: u64 = 3;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeconvSpec {
    pub n: usize,
    pub half_width: f64,
    pub length_scale: f64,
    pub periodicity: f64,
    pub variance: f64,
}

impl Default for DeconvSpec {
    fn default() -> Self {
        Self { n: 100, half_width: DEFAULT_HALF_WIDTH, length_scale: 0.5, periodicity: 20.0, variance: 1e-4 }
    }
}

impl DeconvSpec {
    pub fn operator(&self) -> Result<DMatrix<f64>> {
        deconv_operator(&Grid1D::new(self.n)?, self.half_width)
    }

    pub fn prior(&self) -> Result<GaussianMeasure> {
        let pts = Grid1D::new(self.n)?.points();
        let cov = exp_sine_squared_cov(&pts, self.length_scale, self.periodicity, self.variance)?;
        GaussianMeasure::new(DVector::zeros(self.n), cov)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LorenzSpec {
    pub n: usize,
    pub m: usize,
    pub forcing: f64,
    pub t_final: f64,
    pub h: f64,
    pub prior_mean: f64,
    pub length_scale: f64,
    pub periodicity: f64,
    pub variance: f64,
    /// Standard deviation of the small perturbation added to the truth.
    pub truth_jitter: f64,
}

impl Default for LorenzSpec {
    fn default() -> Self {
        Self {
            n: 100,
            m: 100,
            forcing: 8.0,
            t_final: 0.3,
            h: 0.01,
            prior_mean: 2.0,
            length_scale: 0.5,
            periodicity: 20.0,
            variance: 1.0,
            truth_jitter: 0.01,
        }
    }
}

impl LorenzSpec {
    pub fn prior(&self) -> Result<GaussianMeasure> {
        let pts = Grid1D::new(self.n)?.points();
        let cov = exp_sine_squared_cov(&pts, self.length_scale, self.periodicity, self.variance)?;
        GaussianMeasure::new(DVector::from_element(self.n, self.prior_mean), cov)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatSpec {
    pub s: usize,
    pub m: usize,
    pub source: f64,
    pub prior_scale: f64,
    pub harmonic_faces: bool,
}

impl Default for HeatSpec {
    fn default() -> Self {
        Self { s: 24, m: 120, source: 1.0, prior_scale: 1.0, harmonic_faces: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProblemSpec {
    Deconv(DeconvSpec),
    Lorenz96(LorenzSpec),
    Heat2d(HeatSpec),
}

impl ProblemSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemSpec::Deconv(_) => "deconv",
            ProblemSpec::Lorenz96(_) => "lorenz96",
            ProblemSpec::Heat2d(_) => "heat2d",
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, ProblemSpec::Deconv(_))
    }

    /// Default relative-change tolerance: tighter for the linear problem.
    pub fn default_eps_c(&self) -> f64 {
        if self.is_linear() {
            1e-5
        } else {
            1e-4
        }
    }
}

pub struct Scenario {
    pub spec: ProblemSpec,
    pub forward: Arc<dyn ForwardOperator>,
    /// Gaussian prior when it is available in dense form.
    pub prior: Option<GaussianMeasure>,
    pub observation: Observation,
    pub initial: Ensemble,
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario")
            .field("spec", &self.spec)
            .field("n", &self.forward.input_dim())
            .field("m", &self.forward.output_dim())
            .field("ensemble_size", &self.initial.size())
            .finish()
    }
}

impl Scenario {
    pub fn truth(&self) -> &DVector<f64> {
        self.observation.truth.as_ref().expect("scenarios carry their truth")
    }

    /// Matrix of the forward map for linear problems.
    pub fn matrix(&self) -> Option<&DMatrix<f64>> {
        self.forward.matrix()
    }
}

fn observe<R: Rng + ?Sized>(
    g: &dyn ForwardOperator,
    truth: &DVector<f64>,
    noise_percent: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if !(noise_percent >= 0.0) {
        return Err(EnkiError::InvalidParameter(format!("noise percent must be non-negative, got {noise_percent}")));
    }
    let clean = g.apply(truth).map_err(|source| EnkiError::Forward { particle: 0, source })?;
    Ok(add_noise_with(&clean, noise_percent, rng))
}

/// Builds the problem for `seed` with an initial ensemble of `ensemble_size`.
pub fn build(spec: &ProblemSpec, ensemble_size: usize, noise_percent: f64, seed: u64) -> Result<Scenario> {
    if ensemble_size < 2 {
        return Err(EnkiError::InvalidParameter(format!("ensemble size must be at least 2, got {ensemble_size}")));
    }
    let mut truth_rng = stream(seed, STREAM_TRUTH);
    let mut noise_rng = stream(seed, STREAM_NOISE);
    let mut ens_rng = stream(seed, STREAM_ENSEMBLE);
    let mut layout_rng = stream(seed, STREAM_LAYOUT);

    match spec {
        ProblemSpec::Deconv(p) => {
            let forward: Arc<dyn ForwardOperator> = Arc::new(LinearOperator::new(p.operator()?));
            let prior = p.prior()?;
            let truth = prior.sample(&mut truth_rng, 1).column(0).into_owned();
            let d = observe(forward.as_ref(), &truth, noise_percent, &mut noise_rng)?;
            let initial = prior.sample_ensemble(&mut ens_rng, ensemble_size)?;
            Ok(Scenario {
                spec: spec.clone(),
                forward,
                prior: Some(prior),
                observation: Observation::with_truth(d, truth),
                initial,
            })
        }
        ProblemSpec::Lorenz96(p) => {
            if p.n == 0 {
                return Err(EnkiError::InvalidParameter("L96 needs n >= 4, got 0".into()));
            }
            let idx: Vec<usize> = (0..p.m).map(|_| layout_rng.random_range(0..p.n)).collect();
            let cfg = L96Config { n: p.n, forcing: p.forcing, t_final: p.t_final, h: p.h, obs_indices: idx };
            let forward: Arc<dyn ForwardOperator> = Arc::new(Lorenz96::new(cfg)?);
            let prior = p.prior()?;
            let mut truth = prior.sample(&mut truth_rng, 1).column(0).into_owned();
            truth += standard_normal_matrix(&mut truth_rng, p.n, 1).column(0) * p.truth_jitter;
            let d = observe(forward.as_ref(), &truth, noise_percent, &mut noise_rng)?;
            let initial = prior.sample_ensemble(&mut ens_rng, ensemble_size)?;
            Ok(Scenario {
                spec: spec.clone(),
                forward,
                prior: Some(prior),
                observation: Observation::with_truth(d, truth),
                initial,
            })
        }
        ProblemSpec::Heat2d(p) => {
            let grid = Grid2D::new(p.s)?;
            if p.m == 0 || p.m > grid.len() {
                return Err(EnkiError::InvalidParameter(format!(
                    "heat needs 1..={} observation points, got {}",
                    grid.len(),
                    p.m
                )));
            }
            let mut idx = sample(&mut layout_rng, grid.len(), p.m).into_vec();
            idx.sort_unstable();
            let mut model = Heat2d::new(grid, idx)?;
            model.source = p.source;
            if p.harmonic_faces {
                model.face_mean = super::heat2d::FaceMean::Harmonic;
            }
            let forward: Arc<dyn ForwardOperator> = Arc::new(model);
            let prior = LaplacianSqPrior::new(grid, p.prior_scale);
            let truth = prior.sample(&mut truth_rng, 1).column(0).into_owned();
            let d = observe(forward.as_ref(), &truth, noise_percent, &mut noise_rng)?;
            let initial = Ensemble::new(prior.sample(&mut ens_rng, ensemble_size))?;
            Ok(Scenario { spec: spec.clone(), forward, prior: None, observation: Observation::with_truth(d, truth), initial })
        }
    }
}

/// The deconvolution problem in single-step form, with Sigma = sigma_mu I,
/// for the finite-sample bound experiments. Data come from the same truth
/// and noise streams as [`build`].
pub fn deconv_linear_problem(spec: &DeconvSpec, sigma_mu: f64, noise_percent: f64, seed: u64) -> Result<LinearProblem> {
    if !(sigma_mu > 0.0) {
        return Err(EnkiError::InvalidParameter(format!("noise variance must be positive, got {sigma_mu}")));
    }
    let a = spec.operator()?;
    let prior = spec.prior()?;
    let truth = prior.sample(&mut stream(seed, STREAM_TRUTH), 1).column(0).into_owned();
    let clean = &a * &truth;
    if !(noise_percent >= 0.0) {
        return Err(EnkiError::InvalidParameter(format!("noise percent must be non-negative, got {noise_percent}")));
    }
    let d = add_noise_with(&clean, noise_percent, &mut stream(seed, STREAM_NOISE));
    LinearProblem::new(a, prior, DMatrix::identity(spec.n, spec.n) * sigma_mu, d)
}
