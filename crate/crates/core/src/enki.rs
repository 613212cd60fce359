//! Iterative ensemble Kalman inversion.
//!
//! One iteration maps every particle through
//! `u <- u + alpha C_up (mu I + alpha C_pp)^-1 (d - G(u))`, with the same
//! data vector `d` for all particles. The step-size factor comes from an
//! [`AlphaPolicy`]; vanilla EnKI is the constant policy alpha = 1.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::ensemble::{evaluate_ensemble, Ensemble, ForwardOperator, ForwardStats, NoiseModel, Observation};
use crate::error::{EnkiError, Result};
use crate::linalg::{check_dims, cholesky, column_space_basis, shifted};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Termination {
    pub eps_c: f64,
    pub i_max: usize,
}

impl Termination {
    pub fn new(eps_c: f64, i_max: usize) -> Result<Self> {
        if !(eps_c > 0.0) {
            return Err(EnkiError::InvalidParameter(format!("eps_c must be positive, got {eps_c}")));
        }
        if i_max < 1 {
            return Err(EnkiError::InvalidParameter("I_max must be at least 1".into()));
        }
        Ok(Self { eps_c, i_max })
    }
}

/// Step-size factor for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum Gain {
    Shared(f64),
    PerParticle(Vec<f64>),
}

impl Gain {
    fn summary(&self) -> (f64, f64, f64) {
        match self {
            Gain::Shared(a) => (*a, *a, *a),
            Gain::PerParticle(v) => {
                let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi, v.iter().sum::<f64>() / v.len() as f64)
            }
        }
    }
}

/// What a policy decided for one iteration, plus diagnostics for the history.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaChoice {
    pub gain: Gain,
    pub delta_k: Option<f64>,
    pub eps_delta: Option<f64>,
}

impl AlphaChoice {
    pub fn shared(alpha: f64) -> Self {
        Self { gain: Gain::Shared(alpha), delta_k: None, eps_delta: None }
    }
}

pub trait AlphaPolicy {
    fn name(&self) -> &'static str;

    /// Ensemble to take the step from, if different from the current one.
    fn extrapolate(&mut self, _state: &EnkiState) -> Option<Ensemble> {
        None
    }

    /// `k` is the number of completed iterations.
    fn choose(&mut self, k: usize, stats: &ForwardStats, d: &DVector<f64>, noise: &NoiseModel) -> Result<AlphaChoice>;
}

/// alpha = const; `Constant(1.0)` is vanilla EnKI.
#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl AlphaPolicy for Constant {
    fn name(&self) -> &'static str {
        "vanilla"
    }

    fn choose(&mut self, _: usize, _: &ForwardStats, _: &DVector<f64>, _: &NoiseModel) -> Result<AlphaChoice> {
        Ok(AlphaChoice::shared(self.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    /// Misfit at the mean of the updated ensemble.
    pub loss: f64,
    pub rel_change: f64,
    pub spread: f64,
    pub alpha_mean: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub delta_k: Option<f64>,
    pub eps_delta: Option<f64>,
    pub rel_error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EnkiState {
    pub k: usize,
    pub ensemble: Ensemble,
    pub prev_ensemble: Option<Ensemble>,
    pub history: Vec<IterationRecord>,
}

impl EnkiState {
    pub fn new(ensemble: Ensemble) -> Self {
        Self { k: 0, ensemble, prev_ensemble: None, history: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    IterationCap,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Converged => "converged",
            StopReason::IterationCap => "iteration_cap",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: EnkiState,
    pub stop: StopReason,
    /// Forward-map evaluations spent on the iteration itself (N per step).
    pub forward_evals: usize,
}

/// ½‖d − G(u)‖² / mu
pub fn misfit_loss(u: &DVector<f64>, g: &dyn ForwardOperator, noise: &NoiseModel, d: &DVector<f64>) -> Result<f64> {
    let gu = g.apply(u).map_err(|source| EnkiError::Forward { particle: 0, source })?;
    Ok(0.5 * (d - gu).norm_squared() / noise.mu)
}

/// Relative distance of `u` from the span of the initial particles.
pub fn subspace_residual(u: &DVector<f64>, initial: &Ensemble) -> f64 {
    subspace_residual_with_basis(u, &column_space_basis(initial.particles(), 1e-12))
}

pub fn subspace_residual_with_basis(u: &DVector<f64>, basis: &DMatrix<f64>) -> f64 {
    let proj = basis * (basis.transpose() * u);
    (u - proj).norm() / u.norm().max(1e-30)
}

/// Spectral norm of the sample covariance, from the N x N Gram matrix.
pub fn spread(e: &Ensemble) -> f64 {
    let dev = e.deviations();
    let gram = dev.transpose() * &dev / e.size() as f64;
    SymmetricEigen::new(gram).eigenvalues.iter().cloned().fold(0.0, f64::max)
}

/// Applies the gain to every particle; one Cholesky per distinct alpha.
pub fn update_particles(
    particles: &DMatrix<f64>,
    stats: &ForwardStats,
    d: &DVector<f64>,
    noise: &NoiseModel,
    gain: &Gain,
) -> Result<DMatrix<f64>> {
    let big_n = particles.ncols();
    check_dims("data", (d.len(), 1), (stats.images.nrows(), 1))?;
    let residuals = stats.residuals(d);
    let groups: BTreeMap<u64, (f64, Vec<usize>)> = match gain {
        Gain::Shared(a) => BTreeMap::from([(0, (*a, (0..big_n).collect()))]),
        Gain::PerParticle(v) => {
            check_dims("per-particle alpha", (v.len(), 1), (big_n, 1))?;
            let mut map: BTreeMap<u64, (f64, Vec<usize>)> = BTreeMap::new();
            for (i, a) in v.iter().enumerate() {
                map.entry(round_key(*a)).or_insert((*a, Vec::new())).1.push(i);
            }
            map
        }
    };
    let inv_n = 1.0 / big_n as f64;
    let mut out = particles.clone();
    for (alpha, idx) in groups.values() {
        if !(*alpha > 0.0) || !alpha.is_finite() {
            return Err(EnkiError::InvalidParameter(format!("alpha must be positive and finite, got {alpha}")));
        }
        let chol = cholesky(&shifted(&stats.c_pp, noise.mu, *alpha), "mu I + alpha C_pp")?;
        let r = residuals.select_columns(idx);
        let w = chol.solve(&r);
        // C_up W = D_u (D_g^T W) / N keeps the product at n x N.
        let step = &stats.dev_u * (stats.dev_g.transpose() * w) * (alpha * inv_n);
        for (j, &i) in idx.iter().enumerate() {
            let mut col = out.column_mut(i);
            col += step.column(j);
        }
    }
    Ok(out)
}

/// Key for grouping alphas equal to 12 significant digits.
fn round_key(a: f64) -> u64 {
    let s = format!("{:.11e}", a);
    s.parse::<f64>().unwrap_or(a).to_bits()
}

/// One EnKI step with a shared alpha; returns the successor state.
pub fn enki_step(
    state: &EnkiState,
    g: &dyn ForwardOperator,
    noise: &NoiseModel,
    d: &DVector<f64>,
    alpha: f64,
) -> Result<EnkiState> {
    let images = evaluate_ensemble(&state.ensemble, g)?;
    let stats = ForwardStats::from_images(&state.ensemble, images)?;
    let next = update_particles(state.ensemble.particles(), &stats, d, noise, &Gain::Shared(alpha))?;
    let next = Ensemble::new(next).map_err(|_| EnkiError::Divergence { iteration: state.k })?;
    Ok(EnkiState {
        k: state.k + 1,
        prev_ensemble: Some(state.ensemble.clone()),
        ensemble: next,
        history: state.history.clone(),
    })
}

fn rel_change(new: &DMatrix<f64>, old: &DMatrix<f64>) -> f64 {
    let denom = old.norm();
    let diff = (new - old).norm();
    if diff == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

pub fn run(
    initial: Ensemble,
    g: &dyn ForwardOperator,
    noise: &NoiseModel,
    obs: &Observation,
    term: &Termination,
    policy: &mut dyn AlphaPolicy,
) -> Result<RunOutcome> {
    run_observed(initial, g, noise, obs, term, policy, &mut |_, _| {})
}

/// Like [`run`], calling `observer` with the stats used and the new state
/// after each iteration.
pub fn run_observed(
    initial: Ensemble,
    g: &dyn ForwardOperator,
    noise: &NoiseModel,
    obs: &Observation,
    term: &Termination,
    policy: &mut dyn AlphaPolicy,
    observer: &mut dyn FnMut(&ForwardStats, &EnkiState),
) -> Result<RunOutcome> {
    check_dims("data", (obs.m(), 1), (g.output_dim(), 1))?;
    check_dims("noise", (noise.m, 1), (obs.m(), 1))?;
    let d = &obs.d;
    let truth_norm = obs.truth.as_ref().map(|t| t.norm().max(1e-300));
    let mut state = EnkiState::new(initial);
    let mut forward_evals = 0;
    loop {
        let base = policy.extrapolate(&state).unwrap_or_else(|| state.ensemble.clone());
        let images = evaluate_ensemble(&base, g)?;
        forward_evals += base.size();
        if images.iter().any(|x| !x.is_finite()) {
            return Err(EnkiError::Divergence { iteration: state.k });
        }
        let stats = ForwardStats::from_images(&base, images)?;
        let choice = policy.choose(state.k, &stats, d, noise)?;
        let next = update_particles(base.particles(), &stats, d, noise, &choice.gain)?;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(EnkiError::Divergence { iteration: state.k });
        }
        let change = rel_change(&next, state.ensemble.particles());
        let next = Ensemble::new(next)?;
        let mean = next.mean();
        let loss = misfit_loss(&mean, g, noise, d)?;
        if !loss.is_finite() || !change.is_finite() {
            return Err(EnkiError::Divergence { iteration: state.k });
        }
        let (alpha_min, alpha_max, alpha_mean) = choice.gain.summary();
        let record = IterationRecord {
            k: state.k,
            loss,
            rel_change: change,
            spread: spread(&next),
            alpha_mean,
            alpha_min,
            alpha_max,
            delta_k: choice.delta_k,
            eps_delta: choice.eps_delta,
            rel_error: obs.truth.as_ref().zip(truth_norm).map(|(t, tn)| (&mean - t).norm() / tn),
        };
        let prev = std::mem::replace(&mut state.ensemble, next);
        state.prev_ensemble = Some(prev);
        state.k += 1;
        state.history.push(record);
        observer(&stats, &state);
        if change <= term.eps_c {
            return Ok(RunOutcome { state, stop: StopReason::Converged, forward_evals });
        }
        if state.k >= term.i_max {
            return Ok(RunOutcome { state, stop: StopReason::IterationCap, forward_evals });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{standard_normal_matrix, LinearOperator};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, n: usize, m: usize, big_n: usize) -> (LinearOperator, DMatrix<f64>, Ensemble, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = standard_normal_matrix(&mut rng, m, n);
        let e = Ensemble::new(standard_normal_matrix(&mut rng, n, big_n)).unwrap();
        let d = standard_normal_matrix(&mut rng, m, 1).column(0).into_owned();
        (LinearOperator::new(a.clone()), a, e, d)
    }

    #[test]
    fn collapsed_ensemble_does_not_move() {
        let (g, _, _, d) = setup(1, 4, 3, 5);
        let v = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let e = Ensemble::from_columns(&vec![v; 5]).unwrap();
        let noise = NoiseModel::new(0.01, 3).unwrap();
        let next = enki_step(&EnkiState::new(e.clone()), &g, &noise, &d, 1.0).unwrap();
        assert_eq!(next.k, 1);
        assert_eq!(next.ensemble, e);
    }

    #[test]
    fn step_matches_dense_formula() {
        let (g, a, e, d) = setup(2, 6, 4, 5);
        let noise = NoiseModel::new(0.05, 4).unwrap();
        let next = enki_step(&EnkiState::new(e.clone()), &g, &noise, &d, 1.0).unwrap();
        let c = e.covariance();
        let k_gain = &c * a.transpose() * (noise.matrix() + &a * &c * a.transpose()).try_inverse().unwrap();
        for i in 0..5 {
            let u = e.particles().column(i).into_owned();
            let expect = &u + &k_gain * (&d - &a * &u);
            assert!((next.ensemble.particles().column(i) - expect).abs().max() < 1e-11);
        }
    }

    #[test]
    fn alpha_equals_scaled_noise() {
        let (g, _, e, d) = setup(3, 6, 4, 5);
        let alpha = 3.7;
        let noise = NoiseModel::new(0.05, 4).unwrap();
        let scaled = NoiseModel::new(0.05 / alpha, 4).unwrap();
        let s = EnkiState::new(e);
        let a = enki_step(&s, &g, &noise, &d, alpha).unwrap();
        let b = enki_step(&s, &g, &scaled, &d, 1.0).unwrap();
        assert!((a.ensemble.particles() - b.ensemble.particles()).abs().max() < 1e-12);
    }

    #[test]
    fn per_particle_gain_groups_match_shared() {
        let (g, _, e, d) = setup(4, 5, 3, 4);
        let noise = NoiseModel::new(0.1, 3).unwrap();
        let stats = crate::ensemble::ensemble_forward_stats(&e, &g).unwrap();
        let shared = update_particles(e.particles(), &stats, &d, &noise, &Gain::Shared(2.0)).unwrap();
        let per = update_particles(e.particles(), &stats, &d, &noise, &Gain::PerParticle(vec![2.0; 4])).unwrap();
        assert_eq!(shared, per);
        let mixed = update_particles(e.particles(), &stats, &d, &noise, &Gain::PerParticle(vec![1.0, 2.0, 1.0, 2.0]))
            .unwrap();
        let one = update_particles(e.particles(), &stats, &d, &noise, &Gain::Shared(1.0)).unwrap();
        assert_eq!(mixed.column(0), one.column(0));
        assert_eq!(mixed.column(3), shared.column(3));
    }

    #[test]
    fn loss_arithmetic() {
        let g = LinearOperator::new(DMatrix::identity(2, 2));
        let noise = NoiseModel::new(0.01, 2).unwrap();
        let d = DVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(misfit_loss(&d, &g, &noise, &d).unwrap(), 0.0);
        let loss = misfit_loss(&DVector::zeros(2), &g, &noise, &d).unwrap();
        assert!((loss - 100.0).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_loop() {
        let (g, a, _, d) = setup(5, 4, 3, 2);
        let u = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.25]);
        let noise = NoiseModel::new(0.3, 3).unwrap();
        let mut s = 0.0;
        for i in 0..3 {
            let mut gi = 0.0;
            for j in 0..4 {
                gi += a[(i, j)] * u[j];
            }
            s += (d[i] - gi).powi(2);
        }
        assert!((misfit_loss(&u, &g, &noise, &d).unwrap() - 0.5 * s / 0.3).abs() < 1e-12);
    }

    #[test]
    fn subspace_residual_cases() {
        let e = Ensemble::new(DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0])).unwrap();
        let p0 = e.particles().column(0).into_owned();
        assert!(subspace_residual(&p0, &e) <= 1e-12);
        let ortho = DVector::from_vec(vec![0.0, 0.0, 2.0]);
        assert!((subspace_residual(&ortho, &e) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spread_cases() {
        let v = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(spread(&Ensemble::from_columns(&[v.clone(), v.clone()]).unwrap()), 0.0);
        // deviations ±w with |w| = 1: each deviation has norm 1, Gram trace = 1.
        let w = DVector::from_vec(vec![0.6, 0.8]);
        let e = Ensemble::from_columns(&[&v + &w, &v - &w]).unwrap();
        assert!((spread(&e) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn spread_matches_covariance_eigen() {
        let (_, _, e, _) = setup(6, 7, 2, 4);
        let ev = SymmetricEigen::new(e.covariance()).eigenvalues;
        let top = ev.iter().cloned().fold(0.0, f64::max);
        assert!((spread(&e) - top).abs() < 1e-12 * top);
    }

    #[test]
    fn cap_of_one_gives_one_step() {
        let (g, _, e, d) = setup(7, 5, 3, 4);
        let noise = NoiseModel::new(0.1, 3).unwrap();
        let out = run(e, &g, &noise, &Observation::new(d), &Termination::new(1e-30, 1).unwrap(), &mut Constant(1.0))
            .unwrap();
        assert_eq!(out.state.k, 1);
        assert_eq!(out.state.history.len(), 1);
        assert_eq!(out.stop, StopReason::IterationCap);
        assert_eq!(out.forward_evals, 4);
    }

    #[test]
    fn collapsed_initial_converges_immediately() {
        let (g, _, _, d) = setup(8, 3, 2, 3);
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let e = Ensemble::from_columns(&vec![v; 3]).unwrap();
        let noise = NoiseModel::new(0.1, 2).unwrap();
        let out = run(e, &g, &noise, &Observation::new(d), &Termination::new(1e-5, 100).unwrap(), &mut Constant(1.0))
            .unwrap();
        assert_eq!(out.state.k, 1);
        assert_eq!(out.state.history[0].rel_change, 0.0);
        assert_eq!(out.stop, StopReason::Converged);
    }

    struct Explodes;
    impl ForwardOperator for Explodes {
        fn input_dim(&self) -> usize {
            2
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn apply(&self, u: &DVector<f64>) -> std::result::Result<DVector<f64>, crate::ForwardError> {
            Ok(DVector::from_element(1, if u[0] > 0.5 { f64::INFINITY } else { u[0] }))
        }
    }

    #[test]
    fn non_finite_image_reports_divergence() {
        let e = Ensemble::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0])).unwrap();
        let noise = NoiseModel::new(0.1, 1).unwrap();
        let obs = Observation::new(DVector::from_element(1, 1.0));
        let err = run(e, &Explodes, &noise, &obs, &Termination::new(1e-5, 5).unwrap(), &mut Constant(1.0));
        assert_eq!(err.unwrap_err(), EnkiError::Divergence { iteration: 0 });
    }
}
