//! Reference step-size policies: power-law inflation (Chada et al.), an
//! inflation factor fitted by MAP estimation (Anderson), and Nesterov
//! momentum on the particles.

use nalgebra::{DMatrix, DVector};

use crate::enki::{AlphaChoice, AlphaPolicy, EnkiState};
use crate::ensemble::{Ensemble, ForwardStats, NoiseModel};
use crate::error::{EnkiError, Result};
use crate::linalg::{cholesky, shifted};

/// k^beta for k >= 1.
pub fn chada_alpha(k: usize, beta: f64) -> f64 {
    (k.max(1) as f64).powf(beta)
}

/// Power-law inflation; iteration index k (from 0) uses (k + 1)^beta.
#[derive(Debug, Clone, Copy)]
pub struct ChadaPolicy {
    pub beta: f64,
}

impl Default for ChadaPolicy {
    fn default() -> Self {
        Self { beta: 0.8 }
    }
}

impl AlphaPolicy for ChadaPolicy {
    fn name(&self) -> &'static str {
        "chada"
    }

    fn choose(&mut self, k: usize, _: &ForwardStats, _: &DVector<f64>, _: &NoiseModel) -> Result<AlphaChoice> {
        Ok(AlphaChoice::shared(chada_alpha(k + 1, self.beta)))
    }
}

/// ½ r^T S(a)^-1 r + ½ log det S(a) + ½ (a - 1)^2 with S(a) = mu I + a C_pp.
pub fn anderson_objective(alpha: f64, c_pp: &DMatrix<f64>, r: &DVector<f64>, mu: f64) -> f64 {
    let Ok(chol) = cholesky(&shifted(c_pp, mu, alpha), "S(alpha)") else {
        return f64::NAN;
    };
    let quad = r.dot(&chol.solve(r));
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
    0.5 * quad + 0.5 * logdet + 0.5 * (alpha - 1.0).powi(2)
}

/// Minimizes `f` on [lo, hi] by golden-section search. NaN values are
/// treated as +inf.
pub fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let g = |x: f64| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (g(c), g(d));
    let mut any_finite = fc.is_finite() || fd.is_finite();
    for _ in 0..500 {
        if (b - a).abs() <= tol * (1.0 + c.abs()) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = g(c);
            any_finite |= fc.is_finite();
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = g(d);
            any_finite |= fd.is_finite();
        }
    }
    if !any_finite {
        return Err(EnkiError::NanObjective);
    }
    let best = if fc <= fd { c } else { d };
    // Compare against the ends, since the objective need not be unimodal.
    let (fl, fh) = (g(lo), g(hi));
    let fb = g(best);
    Ok(if fl < fb && fl <= fh {
        lo
    } else if fh < fb {
        hi
    } else {
        best
    })
}

pub const ANDERSON_BRACKET: (f64, f64) = (1e-6, 1e4);

pub fn anderson_alpha(c_pp: &DMatrix<f64>, r_bar: &DVector<f64>, mu: f64, bracket: (f64, f64)) -> Result<f64> {
    golden_section(|a| anderson_objective(a, c_pp, r_bar, mu), bracket.0, bracket.1, 1e-12)
}

#[derive(Debug, Clone, Copy)]
pub struct AndersonPolicy {
    pub bracket: (f64, f64),
}

impl Default for AndersonPolicy {
    fn default() -> Self {
        Self { bracket: ANDERSON_BRACKET }
    }
}

impl AlphaPolicy for AndersonPolicy {
    fn name(&self) -> &'static str {
        "anderson"
    }

    fn choose(&mut self, _: usize, stats: &ForwardStats, d: &DVector<f64>, noise: &NoiseModel) -> Result<AlphaChoice> {
        let r_bar = d - &stats.g_mean;
        Ok(AlphaChoice::shared(anderson_alpha(&stats.c_pp, &r_bar, noise.mu, self.bracket)?))
    }
}

/// Momentum coefficient (k - 1) / (k + 2).
pub fn nesterov_coefficient(k: usize) -> f64 {
    (k as f64 - 1.0) / (k as f64 + 2.0)
}

/// v = u_k + c_k (u_k - u_{k-1}); the first step is taken from u_0.
pub fn nesterov_extrapolate(state: &EnkiState) -> Option<Ensemble> {
    let prev = state.prev_ensemble.as_ref()?;
    if state.k < 1 {
        return None;
    }
    let c = nesterov_coefficient(state.k);
    let cur = state.ensemble.particles();
    let v = cur + (cur - prev.particles()) * c;
    Ensemble::new(v).ok()
}

/// Vanilla EnKI steps taken from momentum-extrapolated ensembles.
#[derive(Debug, Clone, Copy, Default)]
pub struct NesterovPolicy;

impl AlphaPolicy for NesterovPolicy {
    fn name(&self) -> &'static str {
        "nesterov"
    }

    fn extrapolate(&mut self, state: &EnkiState) -> Option<Ensemble> {
        nesterov_extrapolate(state)
    }

    fn choose(&mut self, _: usize, _: &ForwardStats, _: &DVector<f64>, _: &NoiseModel) -> Result<AlphaChoice> {
        Ok(AlphaChoice::shared(1.0))
    }
}
