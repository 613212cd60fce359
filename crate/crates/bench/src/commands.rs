//! The four subcommands. Each has a pure part that returns results and a
//! `cmd_*` wrapper that writes artifacts to an output directory.

use std::path::Path;
use std::time::Instant;

use enki_core::baselines::{AndersonPolicy, ChadaPolicy, NesterovPolicy};
use enki_core::bound::{
    eps_max, fit_constants, sample_size, BoundConstants, BoundContext, BoundForm, BoundGridResult, ErrorTable,
    FitOptions, NormSummary, SAMPLE_SIZE_TERM_NAMES,
};
use enki_core::dual::LinearProblem;
use enki_core::enki::{run, AlphaPolicy, Constant, RunOutcome, Termination};
use enki_core::mc::{AlphaMethod, DeltaParams, Mc1Policy, Mc2Policy};
use enki_core::problems::scenario::{build, deconv_linear_problem, Scenario};
use enki_core::{Ensemble, NoiseModel};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{AlphaUpdate, ExperimentConfig, Method, ProblemConfig, RangeForm};
use crate::error::BenchError;
use crate::output::{float, history_rows, write_csv, write_json, HISTORY_COLUMNS};

pub fn delta_params(cfg: &ExperimentConfig) -> DeltaParams {
    DeltaParams { q: cfg.q, eps_delta: cfg.eps_delta, alpha_bound: cfg.alpha_bound }
}

fn alpha_method(cfg: &ExperimentConfig) -> AlphaMethod {
    match cfg.alpha_update {
        AlphaUpdate::Taylor => AlphaMethod::Taylor,
        AlphaUpdate::FixedPoint => AlphaMethod::FixedPoint,
    }
}

pub fn make_policy(cfg: &ExperimentConfig, method: Method) -> Box<dyn AlphaPolicy + Send> {
    match method {
        Method::Vanilla => Box::new(Constant(1.0)),
        Method::Mc1 => Box::new(Mc1Policy::new(delta_params(cfg)).with_method(alpha_method(cfg))),
        Method::Mc2 => {
            let mut p = Mc2Policy::new(delta_params(cfg), cfg.k_recompute).with_method(alpha_method(cfg));
            p.warmup_iterations = cfg.mc2_warmup;
            Box::new(p)
        }
        Method::Chada => Box::new(ChadaPolicy { beta: cfg.chada_beta }),
        Method::Nesterov => Box::new(NesterovPolicy),
        Method::Anderson => Box::new(AndersonPolicy::default()),
    }
}

pub fn scenario(cfg: &ExperimentConfig) -> Result<Scenario, BenchError> {
    Ok(build(&cfg.problem.spec(), cfg.ensemble_size(), cfg.noise_percent, cfg.seed)?)
}

pub fn noise(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<NoiseModel, BenchError> {
    Ok(NoiseModel::new(cfg.mu, scenario.observation.m())?)
}

pub fn termination(cfg: &ExperimentConfig) -> Result<Termination, BenchError> {
    Ok(Termination::new(cfg.eps_c(), cfg.i_max)?)
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub outcome: RunOutcome,
    pub wall_time_s: f64,
}

impl MethodRun {
    pub fn iterations(&self) -> usize {
        self.outcome.state.k
    }

    pub fn final_loss(&self) -> f64 {
        self.outcome.state.history.last().map_or(f64::NAN, |r| r.loss)
    }

    pub fn final_rel_error(&self) -> Option<f64> {
        self.outcome.state.history.last().and_then(|r| r.rel_error)
    }
}

/// Runs `method` from `initial` on a prepared scenario.
pub fn run_method(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    method: Method,
    initial: Ensemble,
) -> Result<MethodRun, BenchError> {
    delta_params(cfg).validate()?;
    let noise = noise(cfg, scenario)?;
    let term = termination(cfg)?;
    let mut policy = make_policy(cfg, method);
    let start = Instant::now();
    let outcome = run(initial, scenario.forward.as_ref(), &noise, &scenario.observation, &term, policy.as_mut())?;
    Ok(MethodRun { method, outcome, wall_time_s: start.elapsed().as_secs_f64() })
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub command: &'static str,
    pub problem: &'static str,
    pub method: Method,
    pub ensemble_size: usize,
    pub iterations: usize,
    pub stop_reason: &'static str,
    pub forward_evals: usize,
    pub final_loss: f64,
    pub rel_error_vs_truth: Option<f64>,
    pub final_alpha_mean: Option<f64>,
    pub wall_time_s: f64,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl RunSummary {
    fn new(cfg: &ExperimentConfig, run: &MethodRun) -> Self {
        Self {
            command: "run",
            problem: cfg.problem.spec().name(),
            method: run.method,
            ensemble_size: cfg.ensemble_size(),
            iterations: run.iterations(),
            stop_reason: run.outcome.stop.as_str(),
            forward_evals: run.outcome.forward_evals,
            final_loss: run.final_loss(),
            rel_error_vs_truth: run.final_rel_error(),
            final_alpha_mean: run.outcome.state.history.last().map(|r| r.alpha_mean),
            wall_time_s: run.wall_time_s,
            seed: cfg.seed,
            config: cfg.clone(),
        }
    }
}

/// Writes `history.csv` and `summary.json`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary, BenchError> {
    let sc = scenario(cfg)?;
    let initial = sc.initial.clone();
    let result = run_method(cfg, &sc, cfg.method, initial)?;
    std::fs::create_dir_all(out)?;
    write_csv(&out.join("history.csv"), &HISTORY_COLUMNS, &history_rows(&result.outcome.state.history))?;
    let summary = RunSummary::new(cfg, &result);
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Runs every method from the same initial ensemble, in parallel.
pub fn compare(cfg: &ExperimentConfig, methods: &[Method]) -> Result<Vec<MethodRun>, BenchError> {
    if methods.len() < 2 {
        return Err(BenchError::Config(vec![format!("methods: compare needs at least 2, got {}", methods.len())]));
    }
    let sc = scenario(cfg)?;
    methods.par_iter().map(|&m| run_method(cfg, &sc, m, sc.initial.clone())).collect()
}

pub const COMPARE_COLUMNS: [&str; 6] =
    ["method", "iterations", "forward_evals", "stop_reason", "final_loss", "rel_error_vs_truth"];

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub method: Method,
    pub iterations: usize,
    pub forward_evals: usize,
    pub stop_reason: &'static str,
    pub final_loss: f64,
    pub rel_error_vs_truth: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub command: &'static str,
    pub problem: &'static str,
    pub ensemble_size: usize,
    pub rows: Vec<CompareRow>,
    pub seed: u64,
    pub config: ExperimentConfig,
}

/// Writes `compare.csv`, one `history_<i>_<method>.csv` per run, and
/// `compare.json`. Wall times go only to the JSON so the CSVs stay
/// reproducible.
pub fn cmd_compare(cfg: &ExperimentConfig, methods: &[Method], out: &Path) -> Result<CompareSummary, BenchError> {
    let runs = compare(cfg, methods)?;
    std::fs::create_dir_all(out)?;
    let rows: Vec<CompareRow> = runs
        .iter()
        .map(|r| CompareRow {
            method: r.method,
            iterations: r.iterations(),
            forward_evals: r.outcome.forward_evals,
            stop_reason: r.outcome.stop.as_str(),
            final_loss: r.final_loss(),
            rel_error_vs_truth: r.final_rel_error(),
            wall_time_s: r.wall_time_s,
        })
        .collect();
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.as_str().to_string(),
                r.iterations.to_string(),
                r.forward_evals.to_string(),
                r.stop_reason.to_string(),
                float(r.final_loss),
                r.rel_error_vs_truth.map(float).unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(&out.join("compare.csv"), &COMPARE_COLUMNS, &csv_rows)?;
    for (i, r) in runs.iter().enumerate() {
        let path = out.join(format!("history_{i}_{}.csv", r.method.as_str()));
        write_csv(&path, &HISTORY_COLUMNS, &history_rows(&r.outcome.state.history))?;
    }
    let summary = CompareSummary {
        command: "compare",
        problem: cfg.problem.spec().name(),
        ensemble_size: cfg.ensemble_size(),
        rows,
        seed: cfg.seed,
        config: cfg.clone(),
    };
    write_json(&out.join("compare.json"), &summary)?;
    Ok(summary)
}

/// The single-step deconvolution problem used by the bound commands.
pub fn bound_problem(cfg: &ExperimentConfig) -> Result<LinearProblem, BenchError> {
    let ProblemConfig::Deconv(p) = &cfg.problem else {
        return Err(BenchError::Config(vec![format!(
            "problem: the bound commands need the linear deconv problem, got {}",
            cfg.problem.spec().name()
        )]));
    };
    Ok(deconv_linear_problem(&p.spec(), cfg.bound.sigma_mu, cfg.noise_percent, cfg.seed)?)
}

fn bound_form(cfg: &ExperimentConfig) -> BoundForm {
    match cfg.bound.form {
        RangeForm::Theorem => BoundForm::Theorem,
        RangeForm::Corollary => BoundForm::Corollary,
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct WorstCell {
    pub n: usize,
    pub eps: f64,
    pub empirical: f64,
    pub theoretical: f64,
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct BoundOutcome {
    pub norms: NormSummary,
    pub eps_max: f64,
    pub anchor: f64,
    pub c_range: (f64, f64),
    pub constants: BoundConstants,
    pub objective: f64,
    pub fit_seed: u64,
    pub validation_seed: u64,
    /// Grid on the trials the constants were fitted to.
    pub fit_grid: BoundGridResult,
    /// Same grid on an independent set of trials.
    pub validation: BoundGridResult,
}

impl BoundOutcome {
    pub fn worst(&self) -> WorstCell {
        let g = &self.validation;
        let w = g.worst_cell();
        WorstCell {
            n: g.n_values[w.n_index],
            eps: g.eps_values[w.eps_index],
            empirical: g.empirical[w.n_index][w.eps_index],
            theoretical: g.theoretical[w.n_index][w.eps_index],
            margin: w.margin,
        }
    }
}

/// Draws the error tables, fits (c, c1, c2) at the anchor and checks the
/// fitted bound against fresh trials. The validation trials use seed + 1.
pub fn verify_bound(cfg: &ExperimentConfig) -> Result<BoundOutcome, BenchError> {
    let b = &cfg.bound;
    let problem = bound_problem(cfg)?;
    let norms = NormSummary::from_problem(&problem)?;
    let emax = eps_max(&norms, b.eta, bound_form(cfg))?;
    let eps_values: Vec<f64> = match &b.eps_values {
        Some(v) => v.clone(),
        None => (1..=b.eps_count).map(|j| emax * j as f64 / b.eps_count as f64).collect(),
    };
    let anchor = b.anchor.unwrap_or(emax);
    let ctx = BoundContext::new(problem)?;

    let fit_seed = cfg.seed;
    let fit_table = ErrorTable::draw(&ctx, &b.n_values, b.trials, fit_seed)?;
    // Keep c * anchor inside the bulk of the error distribution; otherwise the
    // fit can make every event certain and the bound trivially tight.
    let mid = fit_table.get(b.n_values[b.n_values.len() / 2]);
    let hi = mid.quantile(b.c_quantiles.1) / anchor;
    let lo = mid.quantile(b.c_quantiles.0) / anchor;
    let c_range = (if lo > 0.0 { lo } else { hi * 1e-3 }, hi);
    let opts = FitOptions { c_range, restarts: b.fit_restarts, seed: cfg.seed, ..FitOptions::default() };
    let fit = fit_constants(&fit_table, &norms, b.eta, &b.n_values, anchor, &eps_values, &opts)?;

    let validation_seed = cfg.seed.wrapping_add(1);
    let val_table = ErrorTable::draw(&ctx, &b.n_values, b.trials, validation_seed)?;
    let fit_grid = BoundGridResult::evaluate(&fit_table, &norms, &fit.constants, &b.n_values, &eps_values);
    let validation = BoundGridResult::evaluate(&val_table, &norms, &fit.constants, &b.n_values, &eps_values);
    Ok(BoundOutcome {
        norms,
        eps_max: emax,
        anchor,
        c_range,
        constants: fit.constants,
        objective: fit.objective,
        fit_seed,
        validation_seed,
        fit_grid,
        validation,
    })
}

pub const BOUND_COLUMNS: [&str; 7] = ["set", "N", "eps", "empirical", "theoretical", "K", "seed"];

#[derive(Debug, Clone, Serialize)]
pub struct BoundSummary {
    pub command: &'static str,
    pub eps_max: f64,
    pub anchor: f64,
    pub eps_values: Vec<f64>,
    pub c: f64,
    pub c1: f64,
    pub c2: f64,
    pub eta: f64,
    pub c_range: (f64, f64),
    pub fit_objective: f64,
    pub dominates: bool,
    pub worst_cell: WorstCell,
    pub fit_seed: u64,
    pub validation_seed: u64,
    pub wall_time_s: f64,
    pub seed: u64,
    pub config: ExperimentConfig,
}

/// Writes `bound.csv` (fit and validation cells) and `bound.json`; fails
/// with [`BenchError::Dominance`] when a validation cell is violated.
pub fn cmd_verify_bound(cfg: &ExperimentConfig, out: &Path) -> Result<BoundSummary, BenchError> {
    let start = Instant::now();
    let res = verify_bound(cfg)?;
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for (set, grid, seed) in [("fit", &res.fit_grid, res.fit_seed), ("validation", &res.validation, res.validation_seed)] {
        for (i, n) in grid.n_values.iter().enumerate() {
            for (j, e) in grid.eps_values.iter().enumerate() {
                rows.push(vec![
                    set.to_string(),
                    n.to_string(),
                    float(*e),
                    float(grid.empirical[i][j]),
                    float(grid.theoretical[i][j]),
                    grid.trials[i].to_string(),
                    seed.to_string(),
                ]);
            }
        }
    }
    write_csv(&out.join("bound.csv"), &BOUND_COLUMNS, &rows)?;
    let worst = res.worst();
    let summary = BoundSummary {
        command: "verify-bound",
        eps_max: res.eps_max,
        anchor: res.anchor,
        eps_values: res.validation.eps_values.clone(),
        c: res.constants.c,
        c1: res.constants.c1,
        c2: res.constants.c2,
        eta: res.constants.eta,
        c_range: res.c_range,
        fit_objective: res.objective,
        dominates: res.validation.dominates(),
        worst_cell: worst,
        fit_seed: res.fit_seed,
        validation_seed: res.validation_seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        config: cfg.clone(),
    };
    write_json(&out.join("bound.json"), &summary)?;
    if !summary.dominates {
        return Err(BenchError::Dominance {
            n: worst.n,
            eps: worst.eps,
            empirical: worst.empirical,
            theoretical: worst.theoretical,
        });
    }
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleSizeTerm {
    pub name: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleSizeSummary {
    pub command: &'static str,
    pub eps: f64,
    pub eps_max: f64,
    pub p_target: f64,
    pub c_m: f64,
    pub log_factor: f64,
    pub terms: Vec<SampleSizeTerm>,
    pub argmax_term: &'static str,
    pub n_min: u64,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl SampleSizeSummary {
    pub fn render(&self) -> String {
        let mut s = format!(
            "eps = {:e} (eps_max = {:e}), p_target = {}, c_m = {}, log(11/(1-p)) = {:.6}\n",
            self.eps, self.eps_max, self.p_target, self.c_m, self.log_factor
        );
        for t in &self.terms {
            let mark = if t.name == self.argmax_term { "  <- max" } else { "" };
            s += &format!("  {:<24} {:.6e}{mark}\n", t.name, t.value);
        }
        s += &format!("N >= {}\n", self.n_min);
        s
    }
}

pub fn sample_size_report(cfg: &ExperimentConfig) -> Result<SampleSizeSummary, BenchError> {
    let problem = bound_problem(cfg)?;
    let norms = NormSummary::from_problem(&problem)?;
    let emax = eps_max(&norms, cfg.bound.eta, bound_form(cfg))?;
    let s = &cfg.sample_size;
    let eps = s.eps.unwrap_or(emax);
    let report = sample_size(eps, s.p_target, &norms, s.c_m)?;
    Ok(SampleSizeSummary {
        command: "sample-size",
        eps,
        eps_max: emax,
        p_target: s.p_target,
        c_m: s.c_m,
        log_factor: report.log_factor,
        terms: SAMPLE_SIZE_TERM_NAMES
            .iter()
            .zip(report.terms)
            .map(|(name, value)| SampleSizeTerm { name, value })
            .collect(),
        argmax_term: SAMPLE_SIZE_TERM_NAMES[report.argmax],
        n_min: report.n_min,
        seed: cfg.seed,
        config: cfg.clone(),
    })
}

/// Writes `sample_size.json` when `out` is given.
pub fn cmd_sample_size(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<SampleSizeSummary, BenchError> {
    let summary = sample_size_report(cfg)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("sample_size.json"), &summary)?;
    }
    Ok(summary)
}
