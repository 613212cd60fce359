//! Experiment configuration, read from versioned JSON.

use std::path::Path;

use enki_core::problems::scenario::{DeconvSpec, HeatSpec, LorenzSpec, ProblemSpec};
use serde::{Deserialize, Serialize};

use crate::error::BenchError;

pub const SCHEMA: &str = "enki-config/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Mc1,
    Mc2,
    Chada,
    Nesterov,
    Anderson,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::Vanilla, Method::Mc1, Method::Mc2, Method::Chada, Method::Nesterov, Method::Anderson];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Mc1 => "mc1",
            Method::Mc2 => "mc2",
            Method::Chada => "chada",
            Method::Nesterov => "nesterov",
            Method::Anderson => "anderson",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaUpdate {
    #[default]
    Taylor,
    FixedPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeForm {
    #[default]
    Theorem,
    Corollary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeconvParams {
    pub n: usize,
    pub half_width: f64,
    pub length_scale: f64,
    pub periodicity: f64,
    pub variance: f64,
}

impl Default for DeconvParams {
    fn default() -> Self {
        let d = DeconvSpec::default();
        Self { n: d.n, half_width: d.half_width, length_scale: d.length_scale, periodicity: d.periodicity, variance: d.variance }
    }
}

impl DeconvParams {
    pub fn spec(&self) -> DeconvSpec {
        DeconvSpec {
            n: self.n,
            half_width: self.half_width,
            length_scale: self.length_scale,
            periodicity: self.periodicity,
            variance: self.variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LorenzParams {
    pub n: usize,
    pub m: usize,
    pub forcing: f64,
    pub t_final: f64,
    pub h: f64,
    pub prior_mean: f64,
    pub length_scale: f64,
    pub periodicity: f64,
    pub variance: f64,
    pub truth_jitter: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        let d = LorenzSpec::default();
        Self {
            n: d.n,
            m: d.m,
            forcing: d.forcing,
            t_final: d.t_final,
            h: d.h,
            prior_mean: d.prior_mean,
            length_scale: d.length_scale,
            periodicity: d.periodicity,
            variance: d.variance,
            truth_jitter: d.truth_jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatParams {
    pub s: usize,
    pub m: usize,
    pub source: f64,
    pub prior_scale: f64,
    pub harmonic_faces: bool,
}

impl Default for HeatParams {
    fn default() -> Self {
        let d = HeatSpec::default();
        Self { s: d.s, m: d.m, source: d.source, prior_scale: d.prior_scale, harmonic_faces: d.harmonic_faces }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    Deconv(DeconvParams),
    Lorenz96(LorenzParams),
    Heat2d(HeatParams),
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig::Deconv(DeconvParams::default())
    }
}

impl ProblemConfig {
    pub fn spec(&self) -> ProblemSpec {
        match self {
            ProblemConfig::Deconv(p) => ProblemSpec::Deconv(p.spec()),
            ProblemConfig::Lorenz96(p) => ProblemSpec::Lorenz96(LorenzSpec {
                n: p.n,
                m: p.m,
                forcing: p.forcing,
                t_final: p.t_final,
                h: p.h,
                prior_mean: p.prior_mean,
                length_scale: p.length_scale,
                periodicity: p.periodicity,
                variance: p.variance,
                truth_jitter: p.truth_jitter,
            }),
            ProblemConfig::Heat2d(p) => ProblemSpec::Heat2d(HeatSpec {
                s: p.s,
                m: p.m,
                source: p.source,
                prior_scale: p.prior_scale,
                harmonic_faces: p.harmonic_faces,
            }),
        }
    }

    pub fn default_ensemble_size(&self) -> usize {
        match self {
            ProblemConfig::Deconv(_) => 20,
            ProblemConfig::Lorenz96(_) => 100,
            ProblemConfig::Heat2d(_) => 50,
        }
    }
}

/// Settings for `verify-bound` and `sample-size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundConfig {
    pub n_values: Vec<usize>,
    /// Explicit eps grid; when absent, `eps_count` evenly spaced points in (0, eps_max].
    pub eps_values: Option<Vec<f64>>,
    pub eps_count: usize,
    /// Anchor for the fit; eps_max when absent.
    pub anchor: Option<f64>,
    pub trials: usize,
    /// Noise variance of the single-step problem, Sigma = sigma_mu I.
    pub sigma_mu: f64,
    pub eta: f64,
    pub form: RangeForm,
    pub fit_restarts: usize,
    /// Quantile band of the error at the middle N that bounds c * anchor.
    pub c_quantiles: (f64, f64),
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            n_values: vec![5, 10, 15, 20, 25],
            eps_values: None,
            eps_count: 6,
            anchor: None,
            trials: 10_000,
            sigma_mu: 1e-4,
            eta: 0.99,
            form: RangeForm::Theorem,
            fit_restarts: 50,
            c_quantiles: (0.05, 0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSizeConfig {
    /// eps_max of the bound problem when absent.
    pub eps: Option<f64>,
    pub p_target: f64,
    pub c_m: f64,
}

impl Default for SampleSizeConfig {
    fn default() -> Self {
        Self { eps: None, p_target: 0.9, c_m: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema: String,
    pub problem: ProblemConfig,
    pub method: Method,
    /// Methods for `compare`.
    pub methods: Vec<Method>,
    /// Ensemble size N; the problem's default when absent.
    #[serde(alias = "N")]
    pub ensemble_size: Option<usize>,
    pub mu: f64,
    /// Relative-change tolerance; 1e-5 for linear and 1e-4 for nonlinear problems when absent.
    pub eps_c: Option<f64>,
    pub i_max: usize,
    pub q: f64,
    pub eps_delta: f64,
    pub alpha_bound: f64,
    pub k_recompute: usize,
    pub mc2_warmup: usize,
    pub alpha_update: AlphaUpdate,
    pub chada_beta: f64,
    pub noise_percent: f64,
    pub seed: u64,
    pub bound: BoundConfig,
    pub sample_size: SampleSizeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA.to_string(),
            problem: ProblemConfig::default(),
            method: Method::Mc1,
            methods: vec![Method::Vanilla, Method::Mc1, Method::Mc2, Method::Chada, Method::Nesterov, Method::Anderson],
            ensemble_size: None,
            mu: 0.01,
            eps_c: None,
            i_max: 10_000,
            q: 0.99,
            eps_delta: 1e-15,
            alpha_bound: 1e4,
            k_recompute: 5,
            mc2_warmup: 10,
            alpha_update: AlphaUpdate::Taylor,
            chada_beta: 0.8,
            noise_percent: 0.02,
            seed: 0,
            bound: BoundConfig::default(),
            sample_size: SampleSizeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| BenchError::Config(vec![format!("parse: {e}")]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn ensemble_size(&self) -> usize {
        self.ensemble_size.unwrap_or_else(|| self.problem.default_ensemble_size())
    }

    pub fn eps_c(&self) -> f64 {
        self.eps_c.unwrap_or_else(|| self.problem.spec().default_eps_c())
    }

    /// Collects every invalid field instead of stopping at the first.
    pub fn validate(&self) -> Result<(), BenchError> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                bad.push(msg);
            }
        };
        check(self.schema == SCHEMA, format!("schema: expected \"{SCHEMA}\", got \"{}\"", self.schema));
        let n = self.ensemble_size();
        check(n >= 2, format!("ensemble_size: must be at least 2, got {n}"));
        check(self.mu > 0.0 && self.mu.is_finite(), format!("mu: must be positive, got {}", self.mu));
        if let Some(e) = self.eps_c {
            check(e > 0.0, format!("eps_c: must be positive, got {e}"));
        }
        check(self.i_max >= 1, "i_max: must be at least 1".into());
        check(self.q > 0.0 && self.q < 1.0, format!("q: must lie in (0, 1), got {}", self.q));
        check(self.eps_delta > 0.0, format!("eps_delta: must be positive, got {}", self.eps_delta));
        check(self.alpha_bound > 1.0, format!("alpha_bound: must exceed 1, got {}", self.alpha_bound));
        check(self.k_recompute >= 1, "k_recompute: must be at least 1".into());
        check(
            (0.0..=0.8).contains(&self.chada_beta),
            format!("chada_beta: must lie in [0, 0.8], got {}", self.chada_beta),
        );
        check(
            self.noise_percent >= 0.0 && self.noise_percent.is_finite(),
            format!("noise_percent: must be non-negative, got {}", self.noise_percent),
        );
        match &self.problem {
            ProblemConfig::Deconv(p) => {
                check(p.n >= 2, format!("problem.n: must be at least 2, got {}", p.n));
                check(p.half_width > 0.0, format!("problem.half_width: must be positive, got {}", p.half_width));
                check(p.length_scale > 0.0, "problem.length_scale: must be positive".into());
                check(p.periodicity > 0.0, "problem.periodicity: must be positive".into());
                check(p.variance > 0.0, "problem.variance: must be positive".into());
            }
            ProblemConfig::Lorenz96(p) => {
                check(p.n >= 4, format!("problem.n: must be at least 4, got {}", p.n));
                check(p.m >= 1, "problem.m: must be at least 1".into());
                check(p.h > 0.0 && p.t_final > 0.0, "problem.h, problem.t_final: must be positive".into());
                let steps = (p.t_final / p.h).round();
                check(
                    (steps * p.h - p.t_final).abs() <= 1e-12,
                    format!("problem.h: {} does not divide t_final {}", p.h, p.t_final),
                );
                check(p.variance > 0.0, "problem.variance: must be positive".into());
                check(p.truth_jitter >= 0.0, "problem.truth_jitter: must be non-negative".into());
            }
            ProblemConfig::Heat2d(p) => {
                check(p.s >= 2, format!("problem.s: must be at least 2, got {}", p.s));
                check(
                    p.m >= 1 && p.m <= p.s * p.s,
                    format!("problem.m: must lie in 1..={}, got {}", p.s * p.s, p.m),
                );
                check(p.prior_scale > 0.0, "problem.prior_scale: must be positive".into());
            }
        }
        let b = &self.bound;
        check(!b.n_values.is_empty() && b.n_values.iter().all(|n| *n >= 1), "bound.n_values: need sizes >= 1".into());
        check(b.trials >= 1, "bound.trials: must be at least 1".into());
        check(b.sigma_mu > 0.0, format!("bound.sigma_mu: must be positive, got {}", b.sigma_mu));
        check(b.eta > 0.0 && b.eta < 1.0, format!("bound.eta: must lie in (0, 1), got {}", b.eta));
        match &b.eps_values {
            Some(v) => check(!v.is_empty() && v.iter().all(|e| *e > 0.0), "bound.eps_values: need positive values".into()),
            None => check(b.eps_count >= 1, "bound.eps_count: must be at least 1".into()),
        }
        if let Some(a) = b.anchor {
            check(a > 0.0, format!("bound.anchor: must be positive, got {a}"));
        }
        let (lo, hi) = b.c_quantiles;
        check(0.0 <= lo && lo <= hi && hi <= 1.0, "bound.c_quantiles: need 0 <= lo <= hi <= 1".into());
        let s = &self.sample_size;
        check(
            s.p_target > 0.0 && s.p_target < 1.0,
            format!("sample_size.p_target: must lie in (0, 1), got {}", s.p_target),
        );
        check(s.c_m > 0.0, format!("sample_size.c_m: must be positive, got {}", s.c_m));
        if let Some(e) = s.eps {
            check(e > 0.0, format!("sample_size.eps: must be positive, got {e}"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(BenchError::Config(bad))
        }
    }
}
