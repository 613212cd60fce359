use enki_core::baselines::{anderson_alpha, anderson_objective, chada_alpha, ANDERSON_BRACKET};
use enki_core::bound::{lower_bound, sample_size, BoundContext, NormSummary};
use enki_core::dual::{map_from_dual, solve_dual_lambda, solve_map_primal, LinearProblem};
use enki_core::enki::{enki_step, run, spread, subspace_residual, Constant, EnkiState, Termination};
use enki_core::ensemble::{
    ensemble_forward_stats, sample_covariance, standard_normal_matrix, Ensemble, GaussianMeasure, LinearOperator,
    NoiseModel, Observation,
};
use enki_core::linalg::{inf_norm, sym_eig_extremes};
use enki_core::mc::{alpha_taylor, delta_of_k, zeta};
use enki_core::problems::heat2d::{assemble, FaceMean};
use enki_core::problems::Grid2D;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn spd(r: &mut ChaCha8Rng, n: usize, ridge: f64) -> DMatrix<f64> {
    let f = standard_normal_matrix(r, n, n);
    &f * f.transpose() / n as f64 + DMatrix::identity(n, n) * ridge
}

fn problem(seed: u64, n: usize, m: usize) -> LinearProblem {
    let mut r = rng(seed);
    let a = standard_normal_matrix(&mut r, m, n) / (n as f64).sqrt();
    let c = spd(&mut r, n, 0.2);
    let sigma = spd(&mut r, m, 0.2);
    let u0 = standard_normal_matrix(&mut r, n, 1).column(0).into_owned();
    let d = standard_normal_matrix(&mut r, m, 1).column(0).into_owned();
    LinearProblem::new(a, GaussianMeasure::new(u0, c).unwrap(), sigma, d).unwrap()
}

fn output_cov(seed: u64, m: usize, rank: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut r = rng(seed);
    let f = standard_normal_matrix(&mut r, m, rank) * 0.3;
    (&f * f.transpose(), standard_normal_matrix(&mut r, m, 1).column(0).into_owned())
}

/// Condition number of C_pp + noise I; rounding in the two gain routes scales with it.
fn gain_condition(e: &Ensemble, g: &LinearOperator, noise: f64) -> f64 {
    let stats = ensemble_forward_stats(e, g).unwrap();
    let m = stats.c_pp.nrows();
    let (lo, hi) = sym_eig_extremes(&(&stats.c_pp + DMatrix::identity(m, m) * noise));
    (hi / lo).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sample_covariance_symmetric_psd_low_rank(seed in any::<u64>(), n in 2usize..12, big_n in 2usize..10) {
        let mut r = rng(seed);
        let e = Ensemble::new(standard_normal_matrix(&mut r, n, big_n)).unwrap();
        let c = sample_covariance(&e);
        prop_assert!((&c - c.transpose()).abs().max() == 0.0);
        let (lo, _) = sym_eig_extremes(&c);
        prop_assert!(lo >= -1e-10 * c.trace());
        let sv = c.clone().svd(false, false).singular_values;
        let mut sv: Vec<f64> = sv.iter().cloned().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        for s in sv.iter().skip(big_n - 1) {
            prop_assert!(*s <= 1e-10 * sv[0].max(1e-300));
        }
    }

    #[test]
    fn linear_forward_stats_match_covariance(seed in any::<u64>(), n in 2usize..10, m in 1usize..8, big_n in 2usize..9) {
        let mut r = rng(seed);
        let a = standard_normal_matrix(&mut r, m, n);
        let e = Ensemble::new(standard_normal_matrix(&mut r, n, big_n)).unwrap();
        let stats = ensemble_forward_stats(&e, &LinearOperator::new(a.clone())).unwrap();
        let c = sample_covariance(&e);
        let cat = &c * a.transpose();
        let acat = &a * &c * a.transpose();
        let close = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
            let scale = y.abs().max().max(1e-300);
            (x - y).abs().max() <= 1e-12 * scale
        };
        prop_assert!(close(&stats.c_up, &cat));
        prop_assert!(close(&stats.c_pp, &acat));
    }

    #[test]
    fn primal_dual_and_kkt(seed in any::<u64>(), n in 2usize..15, m in 1usize..10) {
        let p = problem(seed, n, m);
        let primal = solve_map_primal(&p).unwrap();
        let lambda = solve_dual_lambda(&p).unwrap();
        let dual = map_from_dual(&p, &lambda);
        prop_assert!((&primal - &dual).norm() <= 1e-8 * primal.norm().max(1e-12));
        // u* = u0 - C A^T lambda*, v* = d + Sigma lambda*, A u* = v*
        let v = &p.d + &p.sigma * &lambda;
        let au = &p.a * &dual;
        prop_assert!((&au - &v).norm() <= 1e-8 * v.norm().max(1e-12));
    }

    #[test]
    fn error_split_is_a_triangle_inequality(seed in any::<u64>(), big_n in 2usize..12) {
        let p = problem(seed, 6, 4);
        let a_t = inf_norm(&p.a.transpose());
        let ctx = BoundContext::new(p).unwrap();
        let draw = ctx.draw(big_n, &mut rng(seed ^ 0xabc)).unwrap();
        let b = ctx.breakdown(&draw).unwrap();
        prop_assert!(b.e_u <= b.decomposition_bound(a_t) * (1.0 + 1e-12));
    }

    #[test]
    fn bound_monotone_in_n_and_eps(seed in any::<u64>(), big_n in 1usize..200, frac in 0.01f64..1.0) {
        let p = problem(seed, 5, 4);
        let norms = NormSummary::from_problem(&p).unwrap();
        let (c1, c2) = (0.05, 3.0);
        let eps = frac * norms.c;
        let base = lower_bound(eps, big_n, c1, c2, &norms);
        prop_assert!(lower_bound(eps, big_n + 1, c1, c2, &norms) >= base);
        prop_assert!(lower_bound(eps * 1.1, big_n, c1, c2, &norms) >= base);
    }

    #[test]
    fn sample_size_meets_target(seed in any::<u64>(), p_target in 0.05f64..0.999, frac in 0.01f64..2.0, c_m in 0.1f64..10.0) {
        let p = problem(seed, 5, 4);
        let norms = NormSummary::from_problem(&p).unwrap();
        let eps = frac * norms.c;
        let report = sample_size(eps, p_target, &norms, c_m).unwrap();
        // Any (c1, c2) with max(1/c2, c1) = c_m.
        let low = lower_bound(eps, report.n_min as usize, c_m, 1.0 / c_m, &norms);
        prop_assert!(low >= p_target - 1e-12, "{} < {}", low, p_target);
    }

    #[test]
    fn gain_identity(seed in any::<u64>(), alpha in 0.1f64..50.0, mu in 0.001f64..1.0) {
        let p = problem(seed, 6, 5);
        let g = LinearOperator::new(p.a.clone());
        let e = Ensemble::new(standard_normal_matrix(&mut rng(seed ^ 7), 6, 4)).unwrap();
        let state = EnkiState::new(e);
        let scaled = enki_step(&state, &g, &NoiseModel::new(mu, 5).unwrap(), &p.d, alpha).unwrap();
        let plain = enki_step(&state, &g, &NoiseModel::new(mu / alpha, 5).unwrap(), &p.d, 1.0).unwrap();
        let (x, y) = (scaled.ensemble.particles(), plain.ensemble.particles());
        let tol = 1e-12 * gain_condition(&state.ensemble, &g, mu / alpha);
        prop_assert!((x - y).abs().max() <= tol * y.abs().max().max(1.0), "diff {:e}", (x - y).abs().max());
    }

    #[test]
    fn chada_gain_matches_scaled_noise(seed in any::<u64>(), k in 0usize..50, beta in 0.0f64..0.8) {
        let p = problem(seed, 5, 4);
        let g = LinearOperator::new(p.a.clone());
        let e = Ensemble::new(standard_normal_matrix(&mut rng(seed ^ 11), 5, 3)).unwrap();
        let state = EnkiState::new(e);
        let alpha = chada_alpha(k, beta);
        let a = enki_step(&state, &g, &NoiseModel::new(0.01, 4).unwrap(), &p.d, alpha).unwrap();
        let b = enki_step(&state, &g, &NoiseModel::new(0.01 / alpha, 4).unwrap(), &p.d, 1.0).unwrap();
        let (x, y) = (a.ensemble.particles(), b.ensemble.particles());
        let tol = 1e-12 * gain_condition(&state.ensemble, &g, 0.01 / alpha);
        prop_assert!((x - y).abs().max() <= tol * y.abs().max().max(1.0), "diff {:e}", (x - y).abs().max());
    }

    #[test]
    fn zeta_contracts_and_decreases(seed in any::<u64>(), alpha in 1.0f64..100.0, k in 0usize..100, log_mu in -3.0f64..0.0) {
        let (s, r) = output_cov(seed, 6, 3);
        let mu = 10f64.powf(log_mu);
        let (lo, hi) = sym_eig_extremes(&s);
        let delta = delta_of_k(k, lo.max(0.0), hi.max(0.0), r.norm(), 0.99, 1e-15, mu);
        let z = zeta(alpha, &s, &r, delta, mu).unwrap();
        prop_assert!(z.derivative <= 0.0);
        prop_assert!(z.derivative.abs() <= 0.99);
        prop_assert!(z.value >= 1.0);
        prop_assert!(alpha_taylor(alpha, &s, &r, delta, mu).unwrap() >= 1.0);
    }

    #[test]
    fn anderson_beats_reference_points(seed in any::<u64>(), log_mu in -3.0f64..0.0) {
        let (s, r) = output_cov(seed, 5, 2);
        let mu = 10f64.powf(log_mu);
        let a = anderson_alpha(&s, &r, mu, ANDERSON_BRACKET).unwrap();
        let f = |x: f64| anderson_objective(x, &s, &r, mu);
        let fa = f(a);
        prop_assert!(fa <= f(1.0) + 1e-9 * f(1.0).abs());
        prop_assert!(fa <= f(ANDERSON_BRACKET.0) + 1e-9 * f(ANDERSON_BRACKET.0).abs());
        prop_assert!(fa <= f(ANDERSON_BRACKET.1) + 1e-9 * f(ANDERSON_BRACKET.1).abs());
    }

    #[test]
    fn heat_matrix_symmetric_and_dominant(seed in any::<u64>(), s in 2usize..7, harmonic in any::<bool>()) {
        let grid = Grid2D::new(s).unwrap();
        let u = standard_normal_matrix(&mut rng(seed), grid.len(), 1).column(0) * 2.0;
        let mean = if harmonic { FaceMean::Harmonic } else { FaceMean::Arithmetic };
        let a = assemble(&grid, &u.into_owned(), mean);
        let n = grid.len();
        let mut strict_rows = 0;
        for i in 0..n {
            let off: f64 = (0..n).filter(|j| *j != i).map(|j| a.get(i, j).abs()).sum();
            prop_assert_eq!(a.get(i, (i + 1) % n), a.get((i + 1) % n, i));
            prop_assert!(a.get(i, i) >= off * (1.0 - 1e-14));
            if a.get(i, i) > off * (1.0 + 1e-12) {
                strict_rows += 1;
            }
        }
        // Every node next to the boundary is strictly dominant.
        prop_assert!(strict_rows >= 4 * (s - 1));
    }

    #[test]
    fn linear_iterates_stay_in_initial_span(seed in any::<u64>(), big_n in 2usize..6, alpha in 0.5f64..20.0) {
        let p = problem(seed, 10, 6);
        let g = LinearOperator::new(p.a.clone());
        let initial = Ensemble::new(standard_normal_matrix(&mut rng(seed ^ 3), 10, big_n)).unwrap();
        let out = run(
            initial.clone(),
            &g,
            &NoiseModel::new(0.01, 6).unwrap(),
            &Observation::new(p.d.clone()),
            &Termination::new(1e-14, 20).unwrap(),
            &mut Constant(alpha),
        )
        .unwrap();
        for col in out.state.ensemble.particles().column_iter() {
            prop_assert!(subspace_residual(&col.into_owned(), &initial) <= 1e-8);
        }
    }

    #[test]
    fn linear_spread_never_grows(seed in any::<u64>(), big_n in 2usize..8, alpha in 0.1f64..50.0, log_mu in -4.0f64..0.0) {
        let p = problem(seed, 8, 5);
        let g = LinearOperator::new(p.a.clone());
        let noise = NoiseModel::new(10f64.powf(log_mu), 5).unwrap();
        let mut state = EnkiState::new(Ensemble::new(standard_normal_matrix(&mut rng(seed ^ 5), 8, big_n)).unwrap());
        for _ in 0..5 {
            let before = spread(&state.ensemble);
            state = enki_step(&state, &g, &noise, &p.d, alpha).unwrap();
            prop_assert!(spread(&state.ensemble) <= before * (1.0 + 1e-9) + 1e-14);
        }
    }
}
