//! Adaptive multiplicative covariance correction (EnKI-MC).
//!
//! At iteration k the factor alpha solves the scalar fixed-point equation
//! alpha = zeta(alpha) = 1 + f1(alpha) f2(alpha) / (4 delta(k)), where with
//! M(alpha) = mu I + alpha S and w = M^-1 r,
//!
//! ```text
//! f1 = r^T w,   f2 = w^T S w,   f3 = (S w)^T M^-1 (S w).
//! ```
//!
//! delta(k) is large enough to make zeta a contraction with rate q. MC(I)
//! uses the mean residual and one alpha for the whole ensemble; MC(II) uses
//! each particle's own residual and refreshes its alpha every K iterations.
//! By default alpha is advanced by one Newton step on zeta(alpha) - alpha
//! from the previous value rather than by iterating to the fixed point.

use nalgebra::{DMatrix, DVector};

use crate::enki::{run, AlphaChoice, AlphaPolicy, Gain, RunOutcome, Termination};
use crate::ensemble::{Ensemble, ForwardOperator, ForwardStats, NoiseModel, Observation};
use crate::error::{EnkiError, Result};
use crate::linalg::{cholesky, shifted, sym_eig_extremes};

const GUARD_RETRIES: usize = 100;
const GUARD_FACTOR: f64 = 10.0;
const FIXED_POINT_MAX_ITER: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaParams {
    pub q: f64,
    pub eps_delta: f64,
    pub alpha_bound: f64,
}

impl Default for DeltaParams {
    fn default() -> Self {
        Self { q: 0.99, eps_delta: 1e-15, alpha_bound: 1e4 }
    }
}

impl DeltaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(EnkiError::InvalidParameter(format!("q must lie in (0,1), got {}", self.q)));
        }
        if !(self.eps_delta > 0.0) {
            return Err(EnkiError::InvalidParameter(format!("eps_delta must be positive, got {}", self.eps_delta)));
        }
        if !(self.alpha_bound > 1.0) {
            return Err(EnkiError::InvalidParameter(format!("alpha_bound must exceed 1, got {}", self.alpha_bound)));
        }
        Ok(())
    }
}

/// Residuals and the output covariance S at one iterate.
#[derive(Debug, Clone)]
pub struct ResidualStats {
    pub r_bar: DVector<f64>,
    /// d - G(u^(i)) as columns.
    pub r: DMatrix<f64>,
    pub s: DMatrix<f64>,
    /// Extreme eigenvalues of S, clamped at zero.
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl ResidualStats {
    pub fn new(s: DMatrix<f64>, r_bar: DVector<f64>, r: DMatrix<f64>) -> Self {
        let (lo, hi) = sym_eig_extremes(&s);
        Self { r_bar, r, s, lambda_min: lo.max(0.0), lambda_max: hi.max(0.0) }
    }

    pub fn from_forward(stats: &ForwardStats, d: &DVector<f64>) -> Self {
        Self::new(stats.c_pp.clone(), d - &stats.g_mean, stats.residuals(d))
    }
}

/// (f1, f2, f3) at alpha for residual `r`.
pub fn scalar_functionals(alpha: f64, s: &DMatrix<f64>, r: &DVector<f64>, mu: f64) -> Result<(f64, f64, f64)> {
    let chol = cholesky(&shifted(s, mu, alpha), "M(alpha)")?;
    let w = chol.solve(r);
    let sw = s * &w;
    let f1 = r.dot(&w);
    let f2 = w.dot(&sw);
    let f3 = sw.dot(&chol.solve(&sw));
    Ok((f1, f2, f3))
}

/// delta(k) = 3/(4q) * lambda_max^2 ‖r‖^4 / (mu + lambda_min)^4 + eps_delta * k
pub fn delta_of_k(k: usize, lambda_min: f64, lambda_max: f64, r_norm: f64, q: f64, eps_delta: f64, mu: f64) -> f64 {
    let lmin = lambda_min.max(0.0);
    let first = 3.0 / (4.0 * q) * lambda_max * lambda_max * r_norm.powi(4) / (mu + lmin).powi(4);
    first + eps_delta * k as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Zeta {
    pub value: f64,
    pub derivative: f64,
}

pub fn zeta(alpha: f64, s: &DMatrix<f64>, r: &DVector<f64>, delta: f64, mu: f64) -> Result<Zeta> {
    if !(delta > 0.0) {
        return Err(EnkiError::InvalidParameter(format!("delta must be positive, got {delta}")));
    }
    let (f1, f2, f3) = scalar_functionals(alpha, s, r, mu)?;
    Ok(Zeta { value: 1.0 + f1 * f2 / (4.0 * delta), derivative: -(f2 * f2 + 2.0 * f1 * f3) / (4.0 * delta) })
}

/// Iterates alpha <- zeta(alpha) from `start` until |alpha - zeta(alpha)| <= tol.
pub fn alpha_fixed_point(s: &DMatrix<f64>, r: &DVector<f64>, delta: f64, mu: f64, tol: f64, start: f64) -> Result<f64> {
    let mut alpha = start.max(1.0);
    for _ in 0..FIXED_POINT_MAX_ITER {
        let z = zeta(alpha, s, r, delta, mu)?.value;
        if (z - alpha).abs() <= tol * alpha.max(1.0) {
            return Ok(z);
        }
        alpha = z;
    }
    Err(EnkiError::FixedPointStalled { iterations: FIXED_POINT_MAX_ITER })
}

/// One Newton step on zeta(alpha) - alpha from `alpha_prev`, clamped at 1.
pub fn alpha_taylor(alpha_prev: f64, s: &DMatrix<f64>, r: &DVector<f64>, delta: f64, mu: f64) -> Result<f64> {
    let z = zeta(alpha_prev, s, r, delta, mu)?;
    Ok((alpha_prev + (z.value - alpha_prev) / (1.0 - z.derivative)).max(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlphaMethod {
    #[default]
    Taylor,
    FixedPoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaRecord {
    pub k: usize,
    pub alpha: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaState {
    pub alpha_prev: f64,
    pub eps_delta_current: f64,
    pub history: Vec<AlphaRecord>,
}

impl AlphaState {
    pub fn new(params: &DeltaParams) -> Self {
        Self { alpha_prev: 1.0, eps_delta_current: params.eps_delta, history: Vec::new() }
    }
}

fn single_alpha(
    method: AlphaMethod,
    k: usize,
    alpha_prev: f64,
    stats: &ResidualStats,
    r: &DVector<f64>,
    q: f64,
    eps_delta: f64,
    mu: f64,
) -> Result<(f64, f64)> {
    let delta = delta_of_k(k, stats.lambda_min, stats.lambda_max, r.norm(), q, eps_delta, mu);
    // delta vanishes only when S = 0 or r = 0, where zeta is identically 1.
    if !(delta > 0.0) {
        return Ok((1.0, delta));
    }
    let alpha = match method {
        AlphaMethod::Taylor => alpha_taylor(alpha_prev, &stats.s, r, delta, mu)?,
        AlphaMethod::FixedPoint => alpha_fixed_point(&stats.s, r, delta, mu, 1e-10, alpha_prev)?,
    };
    Ok((alpha, delta))
}

/// MC(I) factor for iteration k. The guard raises eps_delta by a factor of
/// ten until alpha <= alpha_bound; the raised value stays in `state`.
pub fn mc1_alpha(
    k: usize,
    state: &mut AlphaState,
    stats: &ResidualStats,
    params: &DeltaParams,
    mu: f64,
    method: AlphaMethod,
) -> Result<(f64, f64)> {
    for _ in 0..=GUARD_RETRIES {
        let (alpha, delta) =
            single_alpha(method, k, state.alpha_prev, stats, &stats.r_bar, params.q, state.eps_delta_current, mu)?;
        if alpha <= params.alpha_bound {
            state.alpha_prev = alpha;
            state.history.push(AlphaRecord { k, alpha, delta });
            return Ok((alpha, delta));
        }
        state.eps_delta_current *= GUARD_FACTOR;
    }
    Err(EnkiError::GuardExhausted { retries: GUARD_RETRIES })
}

/// MC(II) factors: recomputed from each particle's residual when
/// k % k_recompute == 0, carried over otherwise. Returns the largest delta
/// used, or None when nothing was recomputed.
pub fn mc2_alphas(
    k: usize,
    alphas: &mut [f64],
    eps_delta_current: &mut f64,
    stats: &ResidualStats,
    params: &DeltaParams,
    mu: f64,
    k_recompute: usize,
    method: AlphaMethod,
) -> Result<Option<f64>> {
    if k % k_recompute.max(1) != 0 {
        return Ok(None);
    }
    for _ in 0..=GUARD_RETRIES {
        let mut fresh = Vec::with_capacity(alphas.len());
        let mut delta_max = 0.0f64;
        for (i, prev) in alphas.iter().enumerate() {
            let r = stats.r.column(i).into_owned();
            let (a, dl) = single_alpha(method, k, *prev, stats, &r, params.q, *eps_delta_current, mu)?;
            fresh.push(a);
            delta_max = delta_max.max(dl);
        }
        if fresh.iter().all(|a| *a <= params.alpha_bound) {
            alphas.copy_from_slice(&fresh);
            return Ok(Some(delta_max));
        }
        *eps_delta_current *= GUARD_FACTOR;
    }
    Err(EnkiError::GuardExhausted { retries: GUARD_RETRIES })
}

/// Algorithm MC(I) as an [`AlphaPolicy`]. With `trace_fixed_point` set it
/// also records the exact fixed point at every iteration for comparison.
#[derive(Debug, Clone)]
pub struct Mc1Policy {
    pub params: DeltaParams,
    pub method: AlphaMethod,
    pub state: AlphaState,
    pub trace_fixed_point: bool,
    pub fixed_point_trace: Vec<f64>,
}

impl Mc1Policy {
    pub fn new(params: DeltaParams) -> Self {
        Self {
            params,
            method: AlphaMethod::Taylor,
            state: AlphaState::new(&params),
            trace_fixed_point: false,
            fixed_point_trace: Vec::new(),
        }
    }

    pub fn with_method(mut self, method: AlphaMethod) -> Self {
        self.method = method;
        self
    }
}

impl AlphaPolicy for Mc1Policy {
    fn name(&self) -> &'static str {
        "mc1"
    }

    fn choose(&mut self, k: usize, stats: &ForwardStats, d: &DVector<f64>, noise: &NoiseModel) -> Result<AlphaChoice> {
        let rs = ResidualStats::from_forward(stats, d);
        let start = self.state.alpha_prev;
        let (alpha, delta) = mc1_alpha(k, &mut self.state, &rs, &self.params, noise.mu, self.method)?;
        if self.trace_fixed_point {
            let fp = if delta > 0.0 {
                alpha_fixed_point(&rs.s, &rs.r_bar, delta, noise.mu, 1e-10, start)?
            } else {
                1.0
            };
            self.fixed_point_trace.push(fp);
        }
        Ok(AlphaChoice {
            gain: Gain::Shared(alpha),
            delta_k: Some(delta),
            eps_delta: Some(self.state.eps_delta_current),
        })
    }
}

/// Algorithm MC(II): `warmup` MC(I) iterations, then per-particle factors.
#[derive(Debug, Clone)]
pub struct Mc2Policy {
    pub warmup: Mc1Policy,
    pub warmup_iterations: usize,
    pub k_recompute: usize,
    pub alphas: Vec<f64>,
    last_delta: Option<f64>,
}

impl Mc2Policy {
    pub fn new(params: DeltaParams, k_recompute: usize) -> Self {
        Self {
            warmup: Mc1Policy::new(params),
            warmup_iterations: 10,
            k_recompute: k_recompute.max(1),
            alphas: Vec::new(),
            last_delta: None,
        }
    }

    pub fn with_method(mut self, method: AlphaMethod) -> Self {
        self.warmup.method = method;
        self
    }
}

impl AlphaPolicy for Mc2Policy {
    fn name(&self) -> &'static str {
        "mc2"
    }

    fn choose(&mut self, k: usize, stats: &ForwardStats, d: &DVector<f64>, noise: &NoiseModel) -> Result<AlphaChoice> {
        if k < self.warmup_iterations {
            return self.warmup.choose(k, stats, d, noise);
        }
        if self.alphas.len() != stats.size() {
            self.alphas = vec![self.warmup.state.alpha_prev; stats.size()];
        }
        let rs = ResidualStats::from_forward(stats, d);
        let params = self.warmup.params;
        let method = self.warmup.method;
        let eps = &mut self.warmup.state.eps_delta_current;
        if let Some(dl) = mc2_alphas(k, &mut self.alphas, eps, &rs, &params, noise.mu, self.k_recompute, method)? {
            self.last_delta = Some(dl);
        }
        Ok(AlphaChoice {
            gain: Gain::PerParticle(self.alphas.clone()),
            delta_k: self.last_delta,
            eps_delta: Some(self.warmup.state.eps_delta_current),
        })
    }
}

pub fn run_mc1(
    initial: Ensemble,
    g: &dyn ForwardOperator,
    noise: &NoiseModel,
    obs: &Observation,
    term: &Termination,
    params: &DeltaParams,
) -> Result<RunOutcome> {
    params.validate()?;
    run(initial, g, noise, obs, term, &mut Mc1Policy::new(*params))
}

pub fn run_mc2(
    initial: Ensemble,
    g: &dyn ForwardOperator,
    noise: &NoiseModel,
    obs: &Observation,
    term: &Termination,
    params: &DeltaParams,
    k_recompute: usize,
) -> Result<RunOutcome> {
    params.validate()?;
    run(initial, g, noise, obs, term, &mut Mc2Policy::new(*params, k_recompute))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::standard_normal_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_instance(seed: u64, m: usize, rank: usize) -> (DMatrix<f64>, DVector<f64>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = standard_normal_matrix(&mut rng, m, rank) * 0.1;
        let s = &f * f.transpose();
        let r = standard_normal_matrix(&mut rng, m, 1).column(0).into_owned();
        let mu = 10f64.powf(-3.0 + 2.0 * rand::Rng::random::<f64>(&mut rng));
        (s, r, mu)
    }

    fn dense_functionals(alpha: f64, s: &DMatrix<f64>, r: &DVector<f64>, mu: f64) -> (f64, f64, f64) {
        let minv = shifted(s, mu, alpha).try_inverse().unwrap();
        let f1 = (r.transpose() * &minv * r)[(0, 0)];
        let f2 = (r.transpose() * &minv * s * &minv * r)[(0, 0)];
        let f3 = (r.transpose() * &minv * s * &minv * s * &minv * r)[(0, 0)];
        (f1, f2, f3)
    }

    #[test]
    fn functionals_degenerate_cases() {
        let r = DVector::from_vec(vec![1.0, 2.0, -2.0]);
        let (f1, f2, f3) = scalar_functionals(3.0, &DMatrix::zeros(3, 3), &r, 0.5).unwrap();
        assert!((f1 - 9.0 / 0.5).abs() < 1e-12);
        assert_eq!((f2, f3), (0.0, 0.0));
        let (s, _, _) = random_instance(1, 3, 2);
        assert_eq!(scalar_functionals(2.0, &s, &DVector::zeros(3), 0.1).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn functionals_match_dense_inverse() {
        for seed in 0..10 {
            let (s, r, mu) = random_instance(seed, 8, 5);
            let alpha = 1.0 + seed as f64;
            let got = scalar_functionals(alpha, &s, &r, mu).unwrap();
            let want = dense_functionals(alpha, &s, &r, mu);
            for (g, w) in [(got.0, want.0), (got.1, want.1), (got.2, want.2)] {
                assert!((g - w).abs() <= 1e-10 * w.abs().max(1e-300), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn delta_degenerate_cases() {
        assert_eq!(delta_of_k(7, 0.0, 0.0, 3.0, 0.99, 1e-3, 0.01), 7e-3);
        assert_eq!(delta_of_k(7, 0.0, 2.0, 0.0, 0.99, 1e-3, 0.01), 7e-3);
    }

    #[test]
    fn delta_transcription() {
        let (lmin, lmax, rn, q, eps, mu): (f64, f64, f64, f64, f64, f64) = (0.002, 0.7, 1.3, 0.99, 1e-15, 0.01);
        let want = 0.75 / q * lmax.powi(2) * rn.powi(4) / (mu + lmin).powi(4) + eps * 12.0;
        assert!((delta_of_k(12, lmin, lmax, rn, q, eps, mu) - want).abs() <= 1e-14 * want);
    }

    #[test]
    fn zeta_degenerate_and_invalid() {
        let (s, r, mu) = random_instance(2, 4, 3);
        let z = zeta(2.0, &s, &DVector::zeros(4), 1.0, mu).unwrap();
        assert_eq!((z.value, z.derivative), (1.0, 0.0));
        let z = zeta(2.0, &DMatrix::zeros(4, 4), &r, 1.0, mu).unwrap();
        assert_eq!((z.value, z.derivative), (1.0, 0.0));
        assert!(zeta(1.0, &s, &r, 0.0, mu).is_err());
    }

    #[test]
    fn taylor_is_newton_step() {
        let (s, r, mu) = random_instance(3, 6, 4);
        let delta = 1e3;
        let a0 = 2.5;
        let h = 1e-6;
        let f = |a: f64| zeta(a, &s, &r, delta, mu).unwrap().value - a;
        let df = (f(a0 + h) - f(a0 - h)) / (2.0 * h);
        let newton = (a0 - f(a0) / df).max(1.0);
        let got = alpha_taylor(a0, &s, &r, delta, mu).unwrap();
        assert!((got - newton).abs() <= 1e-6 * newton);
        assert_eq!(alpha_taylor(1.0, &s, &DVector::zeros(6), delta, mu).unwrap(), 1.0);
    }

    #[test]
    fn taylor_keeps_fixed_point() {
        let (s, r, mu) = random_instance(4, 6, 4);
        let delta = delta_of_k(0, 0.0, crate::linalg::sym_eig_extremes(&s).1, r.norm(), 0.99, 1e-15, mu);
        let star = alpha_fixed_point(&s, &r, delta, mu, 1e-14, 1.0).unwrap();
        let again = alpha_taylor(star, &s, &r, delta, mu).unwrap();
        assert!((again - star).abs() <= 1e-10 * star);
    }

    #[test]
    fn fixed_point_trivial_and_contraction_rate() {
        let (s, r, mu) = random_instance(5, 6, 4);
        assert_eq!(alpha_fixed_point(&s, &DVector::zeros(6), 1.0, mu, 1e-10, 1.0).unwrap(), 1.0);
        let (_, lmax) = crate::linalg::sym_eig_extremes(&s);
        let delta = delta_of_k(3, 0.0, lmax, r.norm(), 0.99, 1e-15, mu);
        let star = alpha_fixed_point(&s, &r, delta, mu, 1e-14, 1.0).unwrap();
        let mut a = 1.0;
        for _ in 0..5 {
            let next = zeta(a, &s, &r, delta, mu).unwrap().value;
            if (a - star).abs() > 1e-9 {
                assert!((next - star).abs() <= 0.99 * (a - star).abs() + 1e-12);
            }
            a = next;
        }
    }

    fn stats_from(s: DMatrix<f64>, r_bar: DVector<f64>, big_n: usize) -> ResidualStats {
        let r = DMatrix::from_columns(&vec![r_bar.clone(); big_n]);
        ResidualStats::new(s, r_bar, r)
    }

    #[test]
    fn collapsed_gives_unit_alpha() {
        let params = DeltaParams::default();
        let mut st = AlphaState::new(&params);
        let stats = stats_from(DMatrix::zeros(3, 3), DVector::from_vec(vec![1.0, 0.0, 2.0]), 2);
        let (a, _) = mc1_alpha(0, &mut st, &stats, &params, 0.01, AlphaMethod::Taylor).unwrap();
        assert_eq!(a, 1.0);
    }

    #[test]
    fn guard_raises_eps_delta() {
        // A single tiny eigenvalue of S next to a unit noise level makes the
        // contraction-level delta small and the unguarded alpha huge.
        let v = DVector::from_vec(vec![0.6, 0.8, 0.0]);
        let s = &v * v.transpose() * 1e-8;
        let stats = stats_from(s, v.clone(), 2);
        let params = DeltaParams::default();
        let mut free = AlphaState::new(&DeltaParams { alpha_bound: f64::MAX, ..params });
        let (unguarded, _) =
            mc1_alpha(5, &mut free, &stats, &DeltaParams { alpha_bound: f64::MAX, ..params }, 1.0, AlphaMethod::FixedPoint)
                .unwrap();
        assert!(unguarded > 2.0 * params.alpha_bound);

        let mut st = AlphaState::new(&params);
        let (a, _) = mc1_alpha(5, &mut st, &stats, &params, 1.0, AlphaMethod::FixedPoint).unwrap();
        assert!(a <= params.alpha_bound);
        assert!(st.eps_delta_current > params.eps_delta);
        let raised = st.eps_delta_current;
        mc1_alpha(6, &mut st, &stats, &params, 1.0, AlphaMethod::Taylor).unwrap();
        assert!(st.eps_delta_current >= raised);
    }

    #[test]
    fn mc2_identical_residuals_match_mc1() {
        let (s, r, mu) = random_instance(7, 5, 3);
        let params = DeltaParams::default();
        let stats = stats_from(s, r, 4);
        let mut st = AlphaState::new(&params);
        let (a1, _) = mc1_alpha(5, &mut st, &stats, &params, mu, AlphaMethod::Taylor).unwrap();
        let mut alphas = vec![1.0; 4];
        let mut eps = params.eps_delta;
        mc2_alphas(5, &mut alphas, &mut eps, &stats, &params, mu, 5, AlphaMethod::Taylor).unwrap();
        assert!(alphas.iter().all(|a| *a == a1));
    }

    #[test]
    fn mc2_carries_between_recomputes() {
        let (s, r, mu) = random_instance(8, 5, 3);
        let params = DeltaParams::default();
        let stats = stats_from(s, r, 3);
        let mut alphas = vec![3.0, 4.0, 5.0];
        let mut eps = params.eps_delta;
        let out = mc2_alphas(7, &mut alphas, &mut eps, &stats, &params, mu, 5, AlphaMethod::Taylor).unwrap();
        assert_eq!(out, None);
        assert_eq!(alphas, vec![3.0, 4.0, 5.0]);
    }
}
