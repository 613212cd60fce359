//! Finite-sample error bounds for the single-step EnKF mean, Monte Carlo
//! estimates of the probabilities they bound, and the constant fit that
//! links the two.
//!
//! All matrix norms are induced infinity norms (max absolute row sum) and
//! vector norms are max-abs. With t(eps) = (-‖C‖ + sqrt(‖C‖^2 + 4 eps)) / 2,
//! the tail terms are
//!
//! ```text
//! E1 = exp(-N eps^2 / (4 c1 n ‖C^1/2‖^2))      E2 = exp(-c2 N eps^2 / ‖C‖^2)
//! E3 = exp(-c2 N t^2 / ‖C‖^2)                   E4 = exp(-N t^2 / (4 c1 n ‖C^1/2‖^2))
//! E5 = exp(-N t^2 / (4 c1 m ‖Sigma^1/2‖^2))
//! ```
//!
//! and e_u <= c eps holds with probability at least
//! 1 - 6 E3 - E4 - E5 - E1 - 2 E2.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dual::{map_from_dual, saa_dual_solve, solve_dual_lambda, LinearProblem, PerturbationDraw};
use crate::error::{EnkiError, Result};
use crate::linalg::{cholesky, inf_norm, sym_sqrt, vec_inf_norm};

/// Norms of one linear problem that enter the bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSummary {
    pub n: usize,
    pub m: usize,
    pub a: f64,
    pub a_t: f64,
    pub c: f64,
    pub c_sqrt: f64,
    pub sigma_sqrt: f64,
    /// ‖Sigma + A C A^T‖
    pub b: f64,
    pub b_inv: f64,
    /// ‖A u0 - d‖
    pub residual: f64,
    /// Set when Sigma = mu I.
    pub mu: Option<f64>,
}

impl NormSummary {
    pub fn from_problem(p: &LinearProblem) -> Result<Self> {
        let b_mat = p.dual_matrix();
        let b_inv = cholesky(&b_mat, "dual matrix")?.inverse();
        Ok(Self {
            n: p.n(),
            m: p.m(),
            a: inf_norm(&p.a),
            a_t: inf_norm(&p.a.transpose()),
            c: inf_norm(p.c()),
            c_sqrt: inf_norm(&sym_sqrt(p.c())),
            sigma_sqrt: inf_norm(&sym_sqrt(&p.sigma)),
            b: inf_norm(&b_mat),
            b_inv: inf_norm(&b_inv),
            residual: vec_inf_norm(&p.dual_rhs()),
            mu: scalar_multiple_of_identity(&p.sigma),
        })
    }

    pub fn kappa(&self) -> f64 {
        self.b * self.b_inv
    }

    /// t(eps), the positive root of t (t + ‖C‖) = eps.
    pub fn shifted_eps(&self, eps: f64) -> f64 {
        (-self.c + (self.c * self.c + 4.0 * eps).sqrt()) / 2.0
    }
}

fn scalar_multiple_of_identity(s: &DMatrix<f64>) -> Option<f64> {
    let mu = s[(0, 0)];
    let ok = s.iter().enumerate().all(|(k, &v)| {
        let (i, j) = (k % s.nrows(), k / s.nrows());
        if i == j {
            v == mu
        } else {
            v == 0.0
        }
    });
    ok.then_some(mu)
}

/// Which validity range and constant to use: the general statement, or the
/// cheaper one for Sigma = mu I that avoids kappa(B).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundForm {
    #[default]
    Theorem,
    Corollary,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    pub c: f64,
    pub c1: f64,
    pub c2: f64,
    pub eta: f64,
}

impl BoundConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(EnkiError::InvalidParameter(format!("eta must lie in (0,1), got {}", self.eta)));
        }
        for (name, v) in [("c", self.c), ("c1", self.c1), ("c2", self.c2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EnkiError::InvalidParameter(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta < 1.0 {
        Ok(())
    } else {
        Err(EnkiError::InvalidParameter(format!("eta must lie in (0,1), got {eta}")))
    }
}

fn corollary_mu(norms: &NormSummary) -> Result<f64> {
    norms
        .mu
        .filter(|mu| *mu > 0.0)
        .ok_or_else(|| EnkiError::InvalidParameter("corollary form needs Sigma = mu I".into()))
}

/// Upper end of the eps range in which the bound holds: x (x + ‖C‖) with
/// x = eta ‖B‖ / (kappa(B) ‖A‖^2 ‖C‖), or eta mu / (sqrt(m) ‖A‖^2 ‖C‖) in
/// the corollary form.
pub fn eps_max(norms: &NormSummary, eta: f64, form: BoundForm) -> Result<f64> {
    check_eta(eta)?;
    let denom = norms.a * norms.a * norms.c;
    let x = match form {
        BoundForm::Theorem => eta * norms.b / (norms.kappa() * denom),
        BoundForm::Corollary => eta * corollary_mu(norms)? / ((norms.m as f64).sqrt() * denom),
    };
    Ok(x * (x + norms.c))
}

/// The error constant c = 1 + ‖A^T‖ (nu1 + nu2).
pub fn constant_c(norms: &NormSummary, eta: f64, form: BoundForm) -> Result<f64> {
    check_eta(eta)?;
    let (a, c, r) = (norms.a, norms.c, norms.residual);
    let (nu1, nu2) = match form {
        BoundForm::Theorem => {
            let (b, k) = (norms.b, norms.kappa());
            // The residual factor is multiplied through so r = 0 is harmless.
            let nu1 = k * k / ((1.0 - eta) * b) * (r * a * a * c / b + (1.0 + a));
            (nu1, k * r / b)
        }
        BoundForm::Corollary => {
            let mu = corollary_mu(norms)?;
            let m = norms.m as f64;
            let scale = m / (mu * mu * (1.0 - eta));
            let nu1 = scale * r * a * a * c + scale * (mu + a * c * norms.a_t) * (1.0 + a);
            (nu1, m.sqrt() * r / mu)
        }
    };
    Ok(1.0 + norms.a_t * (nu1 + nu2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailTerms {
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    pub e4: f64,
    pub e5: f64,
}

impl TailTerms {
    /// 6 E3 + E4 + E5 + E1 + 2 E2
    pub fn weighted_sum(&self) -> f64 {
        6.0 * self.e3 + self.e4 + self.e5 + self.e1 + 2.0 * self.e2
    }
}

pub fn tail_terms(eps: f64, big_n: usize, c1: f64, c2: f64, norms: &NormSummary) -> TailTerms {
    let nf = big_n as f64;
    let t = norms.shifted_eps(eps);
    let prior_scale = 4.0 * c1 * norms.n as f64 * norms.c_sqrt * norms.c_sqrt;
    let noise_scale = 4.0 * c1 * norms.m as f64 * norms.sigma_sqrt * norms.sigma_sqrt;
    let c_sq = norms.c * norms.c;
    TailTerms {
        e1: (-nf * eps * eps / prior_scale).exp(),
        e2: (-c2 * nf * eps * eps / c_sq).exp(),
        e3: (-c2 * nf * t * t / c_sq).exp(),
        e4: (-nf * t * t / prior_scale).exp(),
        e5: (-nf * t * t / noise_scale).exp(),
    }
}

/// 1 - weighted tail sum, without the range check. May be negative.
pub fn lower_bound(eps: f64, big_n: usize, c1: f64, c2: f64, norms: &NormSummary) -> f64 {
    1.0 - tail_terms(eps, big_n, c1, c2, norms).weighted_sum()
}

/// Probability that e_u <= c eps is at least this value, for eps in
/// (0, eps_max].
pub fn theorem_probability(
    eps: f64,
    big_n: usize,
    consts: &BoundConstants,
    norms: &NormSummary,
    form: BoundForm,
) -> Result<f64> {
    consts.validate()?;
    let limit = eps_max(norms, consts.eta, form)?;
    if !(eps > 0.0 && eps <= limit * (1.0 + 1e-12)) {
        return Err(EnkiError::EpsOutOfRange { eps, eps_max: limit });
    }
    Ok(lower_bound(eps, big_n, consts.c1, consts.c2, norms))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSizeReport {
    pub n_min: u64,
    /// The five candidates before the c_m log(11/(1-p)) factor.
    pub terms: [f64; 5],
    pub argmax: usize,
    pub log_factor: f64,
    pub c_m: f64,
}

pub const SAMPLE_SIZE_TERM_NAMES: [&str; 5] = [
    "||C||^2/t^2",
    "4n||C^1/2||^2/t^2",
    "4m||Sigma^1/2||^2/t^2",
    "4n||C^1/2||^2/eps^2",
    "||C||^2/eps^2",
];

/// Smallest N that pushes each tail term below (1 - p) / 11, where
/// c_m = max(1/c2, c1).
pub fn sample_size(eps: f64, p_target: f64, norms: &NormSummary, c_m: f64) -> Result<SampleSizeReport> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(EnkiError::InvalidParameter(format!("target probability must lie in (0,1), got {p_target}")));
    }
    if !(eps > 0.0) || !(c_m > 0.0 && c_m.is_finite()) {
        return Err(EnkiError::InvalidParameter(format!("need eps > 0 and c_m > 0, got {eps} and {c_m}")));
    }
    let t = norms.shifted_eps(eps);
    let (n, m) = (norms.n as f64, norms.m as f64);
    let c_sq = norms.c * norms.c;
    let cs_sq = norms.c_sqrt * norms.c_sqrt;
    let terms = [
        c_sq / (t * t),
        4.0 * n * cs_sq / (t * t),
        4.0 * m * norms.sigma_sqrt * norms.sigma_sqrt / (t * t),
        4.0 * n * cs_sq / (eps * eps),
        c_sq / (eps * eps),
    ];
    let argmax = (0..5).fold(0, |best, i| if terms[i] > terms[best] { i } else { best });
    let log_factor = (11.0 / (1.0 - p_target)).ln();
    let n_min = (c_m * log_factor * terms[argmax]).ceil().max(1.0);
    Ok(SampleSizeReport { n_min: n_min as u64, terms, argmax, log_factor, c_m })
}

/// The four pieces of the error split
/// e_u <= e_delta + ‖A^T‖ e_lambda + ‖A^T‖ e_omega ‖lambda*‖.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBreakdown {
    pub e_u: f64,
    pub e_delta: f64,
    pub e_lambda: f64,
    pub e_omega: f64,
    pub lambda_star: f64,
}

impl ErrorBreakdown {
    pub fn decomposition_bound(&self, a_t: f64) -> f64 {
        self.e_delta + a_t * self.e_lambda + a_t * self.e_omega * self.lambda_star
    }
}

/// Quantities shared by every draw on one problem.
#[derive(Debug, Clone)]
pub struct BoundContext {
    pub problem: LinearProblem,
    pub c_sqrt: DMatrix<f64>,
    pub sigma_sqrt: DMatrix<f64>,
    pub lambda_star: DVector<f64>,
    pub u_map: DVector<f64>,
}

impl BoundContext {
    pub fn new(problem: LinearProblem) -> Result<Self> {
        let lambda_star = solve_dual_lambda(&problem)?;
        let u_map = map_from_dual(&problem, &lambda_star);
        Ok(Self {
            c_sqrt: sym_sqrt(problem.c()),
            sigma_sqrt: sym_sqrt(&problem.sigma),
            lambda_star,
            u_map,
            problem,
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, big_n: usize, rng: &mut R) -> Result<PerturbationDraw> {
        PerturbationDraw::sample(&self.c_sqrt, &self.sigma_sqrt, big_n, rng)
    }

    pub fn breakdown(&self, draw: &PerturbationDraw) -> Result<ErrorBreakdown> {
        let p = &self.problem;
        let lambda_bar = saa_dual_solve(p, draw)?;
        let a_omega = &p.a * &draw.omega;
        let u_enkf = p.u0() + &draw.delta_bar - &draw.omega * (a_omega.transpose() * &lambda_bar);
        let oo = &draw.omega * draw.omega.transpose();
        Ok(ErrorBreakdown {
            e_u: vec_inf_norm(&(&self.u_map - u_enkf)),
            e_delta: vec_inf_norm(&draw.delta_bar),
            e_lambda: inf_norm(&oo) * vec_inf_norm(&(&lambda_bar - &self.lambda_star)),
            e_omega: inf_norm(&(&oo - p.c())),
            lambda_star: vec_inf_norm(&self.lambda_star),
        })
    }

    /// e_u alone; skips forming Omega Omega^T.
    pub fn error(&self, draw: &PerturbationDraw) -> Result<f64> {
        let p = &self.problem;
        let lambda_bar = saa_dual_solve(p, draw)?;
        let a_omega = &p.a * &draw.omega;
        let u_enkf = p.u0() + &draw.delta_bar - &draw.omega * (a_omega.transpose() * lambda_bar);
        Ok(vec_inf_norm(&(&self.u_map - u_enkf)))
    }
}

pub fn error_breakdown(p: &LinearProblem, draw: &PerturbationDraw) -> Result<ErrorBreakdown> {
    BoundContext::new(p.clone())?.breakdown(draw)
}

/// RNG for one Monte Carlo trial; independent of the order trials run in.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Sorted errors e_u from `trials` independent draws of size N.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSamples {
    pub big_n: usize,
    pub seed: u64,
    sorted: Vec<f64>,
}

impl ErrorSamples {
    pub fn draw(ctx: &BoundContext, big_n: usize, trials: usize, seed: u64) -> Result<Self> {
        if trials == 0 {
            return Err(EnkiError::InvalidParameter("need at least one trial".into()));
        }
        let mut sorted = (0..trials as u64)
            .into_par_iter()
            .map(|k| {
                let mut rng = trial_rng(seed, k);
                ctx.error(&ctx.draw(big_n, &mut rng)?)
            })
            .collect::<Result<Vec<f64>>>()?;
        sorted.sort_by(f64::total_cmp);
        Ok(Self { big_n, seed, sorted })
    }

    pub fn from_errors(big_n: usize, seed: u64, mut errors: Vec<f64>) -> Self {
        errors.sort_by(f64::total_cmp);
        Self { big_n, seed, sorted: errors }
    }

    pub fn trials(&self) -> usize {
        self.sorted.len()
    }

    /// Fraction of trials with e_u <= threshold.
    pub fn fraction_below(&self, threshold: f64) -> f64 {
        self.sorted.partition_point(|e| *e <= threshold) as f64 / self.sorted.len() as f64
    }

    /// Empirical quantile by the nearest-rank rule.
    pub fn quantile(&self, q: f64) -> f64 {
        let k = ((q.clamp(0.0, 1.0) * self.sorted.len() as f64).ceil() as usize).clamp(1, self.sorted.len());
        self.sorted[k - 1]
    }
}

/// Fraction of `trials` draws of size N whose error satisfies e_u <= c eps.
pub fn empirical_probability(
    p: &LinearProblem,
    big_n: usize,
    eps: f64,
    c: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let ctx = BoundContext::new(p.clone())?;
    Ok(ErrorSamples::draw(&ctx, big_n, trials, seed)?.fraction_below(c * eps))
}

/// Empirical P(e_u <= threshold) at ensemble size N.
pub trait EmpiricalSource {
    fn probability(&self, big_n: usize, threshold: f64) -> f64;
    fn trials(&self, big_n: usize) -> usize;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTable {
    pub samples: Vec<ErrorSamples>,
}

impl ErrorTable {
    pub fn draw(ctx: &BoundContext, n_values: &[usize], trials: usize, seed: u64) -> Result<Self> {
        let samples = n_values.iter().map(|&n| ErrorSamples::draw(ctx, n, trials, seed)).collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    pub fn get(&self, big_n: usize) -> &ErrorSamples {
        self.samples.iter().find(|s| s.big_n == big_n).expect("ensemble size present in the table")
    }
}

impl EmpiricalSource for ErrorTable {
    fn probability(&self, big_n: usize, threshold: f64) -> f64 {
        self.get(big_n).fraction_below(threshold)
    }

    fn trials(&self, big_n: usize) -> usize {
        self.get(big_n).trials()
    }
}

/// Empirical and theoretical probabilities on an (N, eps) grid, indexed
/// `[N index][eps index]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundGridResult {
    pub n_values: Vec<usize>,
    pub eps_values: Vec<f64>,
    pub empirical: Vec<Vec<f64>>,
    pub theoretical: Vec<Vec<f64>>,
    pub trials: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub n_index: usize,
    pub eps_index: usize,
    /// empirical + 1.96 SE - theoretical; negative means a violation.
    pub margin: f64,
}

impl BoundGridResult {
    pub fn evaluate(
        source: &dyn EmpiricalSource,
        norms: &NormSummary,
        consts: &BoundConstants,
        n_values: &[usize],
        eps_values: &[f64],
    ) -> Self {
        let empirical =
            n_values.iter().map(|&n| eps_values.iter().map(|&e| source.probability(n, consts.c * e)).collect()).collect();
        let theoretical = n_values
            .iter()
            .map(|&n| eps_values.iter().map(|&e| lower_bound(e, n, consts.c1, consts.c2, norms)).collect())
            .collect();
        Self {
            n_values: n_values.to_vec(),
            eps_values: eps_values.to_vec(),
            empirical,
            theoretical,
            trials: n_values.iter().map(|&n| source.trials(n)).collect(),
        }
    }

    /// Binomial standard error of one empirical cell.
    pub fn standard_error(&self, i: usize, j: usize) -> f64 {
        let p = self.empirical[i][j];
        (p * (1.0 - p) / self.trials[i] as f64).sqrt()
    }

    /// Cell with the smallest dominance margin.
    pub fn worst_cell(&self) -> GridCell {
        let mut worst = GridCell { n_index: 0, eps_index: 0, margin: f64::INFINITY };
        for i in 0..self.n_values.len() {
            for j in 0..self.eps_values.len() {
                let margin = self.empirical[i][j] + 1.96 * self.standard_error(i, j) - self.theoretical[i][j];
                if margin < worst.margin {
                    worst = GridCell { n_index: i, eps_index: j, margin };
                }
            }
        }
        worst
    }

    pub fn dominates(&self) -> bool {
        self.worst_cell().margin >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Allowed range for c. Without it the fit can make every event certain
    /// by sending c to infinity.
    pub c_range: (f64, f64),
    /// Box for c1 and c2.
    pub c12_range: (f64, f64),
    pub restarts: usize,
    pub max_sweeps: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { c_range: (1e-3, 1e3), c12_range: (1e-15, 1e15), restarts: 50, max_sweeps: 5000, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    pub constants: BoundConstants,
    /// Sum of squared gaps at the anchor eps.
    pub objective: f64,
}

const START_SPREAD: f64 = 6.0;

/// Fits (c, c1, c2) so the bound hugs the empirical probabilities at
/// `anchor` while staying below them at every (N, eps) in the grid.
/// Projected coordinate search in log space from `restarts` random starts.
pub fn fit_constants(
    source: &dyn EmpiricalSource,
    norms: &NormSummary,
    eta: f64,
    n_values: &[usize],
    anchor: f64,
    eps_grid: &[f64],
    opts: &FitOptions,
) -> Result<FitResult> {
    check_eta(eta)?;
    if n_values.is_empty() || !(anchor > 0.0) {
        return Err(EnkiError::InvalidParameter("fit needs ensemble sizes and a positive anchor".into()));
    }
    let (lc_lo, lc_hi) = (opts.c_range.0.ln(), opts.c_range.1.ln());
    let (lk_lo, lk_hi) = (opts.c12_range.0.ln(), opts.c12_range.1.ln());
    if !(lc_lo <= lc_hi && lk_lo < lk_hi) {
        return Err(EnkiError::InvalidParameter("empty fit range".into()));
    }
    let lo = [lc_lo, lk_lo, lk_lo];
    let hi = [lc_hi, lk_hi, lk_hi];
    let project = |x: [f64; 3]| -> [f64; 3] { std::array::from_fn(|i| x[i].clamp(lo[i], hi[i])) };

    let mut checks: Vec<f64> = eps_grid.to_vec();
    checks.push(anchor);
    let feasible = |x: &[f64; 3]| {
        let (c, c1, c2) = (x[0].exp(), x[1].exp(), x[2].exp());
        n_values.iter().all(|&n| {
            checks.iter().all(|&e| lower_bound(e, n, c1, c2, norms) <= source.probability(n, c * e) + 1e-12)
        })
    };
    let objective = |x: &[f64; 3]| {
        let (c, c1, c2) = (x[0].exp(), x[1].exp(), x[2].exp());
        n_values
            .iter()
            .map(|&n| {
                let gap = source.probability(n, c * anchor) - lower_bound(anchor, n, c1, c2, norms).max(0.0);
                gap * gap
            })
            .sum::<f64>()
    };

    // Axis moves plus pairwise diagonals, so the search can slide along an
    // active constraint.
    let mut directions: Vec<[f64; 3]> = Vec::new();
    for i in 0..3 {
        for s in [1.0, -1.0] {
            let mut d = [0.0; 3];
            d[i] = s;
            directions.push(d);
            for j in (i + 1)..3 {
                for t in [1.0, -1.0] {
                    let mut d2 = d;
                    d2[j] = t;
                    directions.push(d2);
                }
            }
        }
    }

    // Starts are drawn around the values of c1 and c2 that put the tail
    // exponents near one for the middle ensemble size; far from there every
    // term saturates and the objective is flat.
    let n_mid = n_values[n_values.len() / 2] as f64;
    let t = norms.shifted_eps(anchor);
    let center = [
        (n_mid * t * t / (4.0 * norms.n as f64 * norms.c_sqrt * norms.c_sqrt)).ln(),
        (norms.c * norms.c / (n_mid * anchor * anchor)).ln(),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<([f64; 3], f64)> = None;
    for _ in 0..opts.restarts.max(1) {
        let x: [f64; 3] = std::array::from_fn(|i| {
            let u = rng.random::<f64>();
            if i == 0 {
                lo[0] + (hi[0] - lo[0]) * u
            } else {
                center[i - 1] + START_SPREAD * (2.0 * u - 1.0)
            }
        });
        let mut x = project(x);
        // Raising c1 and lowering c2 weakens the bound until it is feasible.
        let mut tries = 0;
        while !feasible(&x) && tries < 400 {
            x = project([x[0], x[1] + 1.0, x[2] - 1.0]);
            tries += 1;
        }
        if !feasible(&x) {
            continue;
        }
        let mut fx = objective(&x);
        let mut step = 1.0;
        let mut sweeps = 0;
        while step > 1e-9 && sweeps < opts.max_sweeps {
            sweeps += 1;
            let mut improved = false;
            for dir in &directions {
                {
                    let y = project(std::array::from_fn(|i| x[i] + step * dir[i]));
                    if y == x || !feasible(&y) {
                        continue;
                    }
                    let fy = objective(&y);
                    if fy < fx {
                        x = y;
                        fx = fy;
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        if best.map_or(true, |(_, fb)| fx < fb) {
            best = Some((x, fx));
        }
    }
    let (x, objective) =
        best.ok_or_else(|| EnkiError::InvalidParameter("no feasible starting point for the constant fit".into()))?;
    Ok(FitResult { constants: BoundConstants { c: x[0].exp(), c1: x[1].exp(), c2: x[2].exp(), eta }, objective })
}
