mod common;

use bomm::estimators::*;
use bomm::kernels::{KernelParams, BASE_NUGGET};
use bomm::marginal::{marginal_mean, marginal_variance, uniform_grid};
use bomm::testbed::Objective;
use bomm::{fit, BommError, Dataset, DesignMatrix, Domain, FitConfig, FittedTaag, ModelVariant, RngState, TaagParams};
use common::*;
use rand::Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn lhd_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let cfg = bomm::design::LhdConfig::new(n, d);
    bomm::design::maximin_lhd(&cfg, &mut RngState::new(seed).rng()).unwrap().into_rows()
}

#[test]
fn eta_recovered_from_additive_draws() {
    let kp = KernelParams::new(vec![0.5, 0.5], vec![0.3, 0.3], vec![0.3, 0.3]).unwrap();
    let mut hits = 0;
    for seed in 0..10 {
        let pts = lhd_points(40, 2, seed);
        let h = gp_draw(&mut RngState::new(100 + seed).rng(), &pts, 0.0, &kp);
        let y: Vec<f64> = h.iter().map(|v| 10.0 + v).collect();
        let m = fit(&unit_dataset(pts, y), &FitConfig::default(), RngState::new(seed)).unwrap();
        if m.params().eta < 0.3 {
            hits += 1;
        }
    }
    assert!(hits >= 8, "eta < 0.3 in {hits}/10");
}

#[test]
fn eta_recovered_from_product_draws() {
    let kp = KernelParams::new(vec![0.5, 0.5], vec![0.3, 0.3], vec![0.3, 0.3]).unwrap();
    let mut hits = 0;
    for seed in 0..10 {
        let pts = lhd_points(40, 2, seed);
        let h = gp_draw(&mut RngState::new(200 + seed).rng(), &pts, 1.0, &kp);
        let y: Vec<f64> = h.iter().map(|v| 10.0 + v).collect();
        let m = fit(&unit_dataset(pts, y), &FitConfig::default(), RngState::new(seed)).unwrap();
        if m.params().eta > 0.4 {
            hits += 1;
        }
    }
    assert!(hits >= 8, "eta > 0.4 in {hits}/10");
}

#[test]
fn fit_is_bit_reproducible() {
    let pts = lhd_points(25, 3, 4);
    let y: Vec<f64> = pts.iter().map(|x| (x[0] - 0.2).powi(2) + x[1] * x[2] + 1.0).collect();
    let data = unit_dataset(pts, y);
    let a = fit(&data, &FitConfig::default(), RngState::new(9)).unwrap();
    let b = fit(&data, &FitConfig::default(), RngState::new(9)).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(a.log_marginal().to_bits(), b.log_marginal().to_bits());
    let c = fit(&data, &FitConfig::default(), RngState::new(10)).unwrap();
    assert!(c.log_marginal().is_finite());
}

#[test]
fn sbo_finds_the_bowl_minimum() {
    let dom = Domain::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
    let mut hits = 0;
    for seed in 0..10 {
        let design = DesignMatrix::new(2, lhd_points(30, 2, seed)).unwrap().unscaled(&dom).unwrap();
        let y: Vec<f64> = design.rows().iter().map(|x| x[0] * x[0] + x[1] * x[1]).collect();
        let data = Dataset::new(dom.clone(), design, y).unwrap();
        let m = fit(&data, &FitConfig::new(ModelVariant::SqExp), RngState::new(seed)).unwrap();
        let r = sbo_optimize(&m, &SearchConfig::default(), RngState::new(seed)).unwrap();
        assert_eq!(r.method, Method::SboSqExp);
        if r.x_hat.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.1 {
            hits += 1;
        }
        let again = sbo_optimize(&m, &SearchConfig::default(), RngState::new(seed)).unwrap();
        assert_eq!(r, again);
    }
    assert!(hits >= 8, "{hits}/10 within 0.1 of the origin");
}

#[test]
fn bomm_recovers_additive_bowl_centre() {
    let mut hits = 0;
    for seed in 0..10 {
        let pts = lhd_points(60, 3, seed);
        let y: Vec<f64> = pts.iter().map(|x| 1.0 + x.iter().map(|v| (v - 0.5).powi(2)).sum::<f64>()).collect();
        let cfg = FitConfig {
            fixed_eta: Some(0.0),
            ..FitConfig::default()
        };
        let m = fit(&unit_dataset(pts, y), &cfg, RngState::new(seed)).unwrap();
        assert_eq!(m.params().eta, 0.0);
        let r = bomm(&m, 1001).unwrap();
        if r.x_hat.iter().all(|v| (v - 0.5).abs() < 0.05) {
            hits += 1;
        }
    }
    assert!(hits >= 8, "{hits}/10");
}

#[test]
fn single_point_pushes_every_coordinate_away() {
    let dom = Domain::new(vec![0.0, 10.0, -3.0], vec![1.0, 20.0, 3.0]).unwrap();
    let x1 = vec![0.3, 18.0, -2.0];
    let data = Dataset::new(dom, DesignMatrix::new(3, vec![x1]).unwrap(), vec![4.0]).unwrap();
    let p = TaagParams::new(1.0, 1.0, 1.0, 0.0, KernelParams::isotropic(3, 0.3)).unwrap();
    let m = FittedTaag::condition(data, p, ModelVariant::Taag, BASE_NUGGET).unwrap();
    assert!(m.q()[0] > 0.0);
    assert_eq!(bomm(&m, 1001).unwrap().x_hat, vec![1.0, 10.0, 3.0]);
}

#[test]
fn bomm_commutes_with_dimension_permutation() {
    let mut rng = RngState::new(31).rng();
    let pts = random_points(&mut rng, 12, 3);
    let y: Vec<f64> = (0..12).map(|_| 1.0 + rng.random::<f64>()).collect();
    let kp = random_kernel(&mut rng, 3, 0.1, 1.0);
    let perm = [2, 0, 1];
    let permute = |v: &[f64]| perm.iter().map(|&k| v[k]).collect::<Vec<f64>>();
    let a = FittedTaag::condition(
        unit_dataset(pts.clone(), y.clone()),
        TaagParams::new(0.6, 0.5, 1.0, 0.4, kp.clone()).unwrap(),
        ModelVariant::Taag,
        BASE_NUGGET,
    )
    .unwrap();
    let kp2 = KernelParams::new(permute(&kp.w), permute(&kp.theta_a), permute(&kp.theta_z)).unwrap();
    let b = FittedTaag::condition(
        unit_dataset(pts.iter().map(|p| permute(p)).collect(), y),
        TaagParams::new(0.6, 0.5, 1.0, 0.4, kp2).unwrap(),
        ModelVariant::Taag,
        BASE_NUGGET,
    )
    .unwrap();
    let ra = bomm(&a, 1001).unwrap();
    let rb = bomm(&b, 1001).unwrap();
    assert_eq!(permute(&ra.x_hat), rb.x_hat);
}

fn fitted_nonadditive(seed: u64) -> FittedTaag {
    let pts = lhd_points(30, 3, seed);
    let y: Vec<f64> = pts
        .iter()
        .map(|x| 2.0 + (x[0] - 0.3).powi(2) + 4.0 * (x[0] - x[1]).powi(2) * x[2] + x[2])
        .collect();
    fit(&unit_dataset(pts, y), &FitConfig::default(), RngState::new(seed)).unwrap()
}

#[test]
fn tail_coordinates_minimize_the_closed_form() {
    let m = fitted_nonadditive(3);
    let std = Normal::new(0.0, 1.0).unwrap();
    for alpha in [0.1, 0.35, 0.8] {
        let z = std.inverse_cdf(alpha);
        let factor = std.pdf(z) / alpha;
        let r = bomm_tail(&m, alpha, 201).unwrap();
        for l in 0..3 {
            let grid = uniform_grid(0.0, 1.0, 201);
            let vals: Vec<f64> = grid
                .iter()
                .map(|&t| marginal_mean(&m, l, t).unwrap() - marginal_variance(&m, l, t).unwrap().sqrt() * factor)
                .collect();
            let best = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let k = grid.iter().position(|&t| t == r.x_hat[l]).expect("estimate lies on the grid");
            assert!(vals[k] - best <= 1e-9 * best.abs().max(1.0), "alpha {alpha} l {l}");
        }
    }
    assert!(matches!(bomm_tail(&m, 5e-4, 201), Err(BommError::InvalidParameter(_))));
}

#[test]
fn tail_at_one_reproduces_bomm_on_fitted_models() {
    for seed in 0..3 {
        let m = fitted_nonadditive(seed);
        assert_eq!(bomm_tail(&m, 1.0, 1001).unwrap().x_hat, bomm(&m, 1001).unwrap().x_hat);
    }
}

#[test]
fn alpha_selection_is_exhaustively_optimal() {
    let m = fitted_nonadditive(5);
    let grid: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
    let (alpha, x) = select_alpha(&m, &grid, 201).unwrap();
    let score = |x: &[f64]| m.posterior_h(x).unwrap().0;
    let best = grid
        .iter()
        .map(|&a| score(&bomm_tail(&m, a, 201).unwrap().x_hat))
        .fold(f64::INFINITY, f64::min);
    assert_eq!(score(&x), best);
    assert_eq!(x, bomm_tail(&m, alpha, 201).unwrap().x_hat);
    assert_eq!(select_alpha(&m, &[1.0], 201).unwrap().0, 1.0);
}

#[test]
fn alpha_ties_go_to_the_largest_level() {
    let data = Dataset::new(Domain::unit(2), DesignMatrix::empty(2), vec![]).unwrap();
    let p = TaagParams::new(1.0, 0.0, 1.0, 0.5, KernelParams::isotropic(2, 0.5)).unwrap();
    let m = FittedTaag::condition(data, p, ModelVariant::Taag, BASE_NUGGET).unwrap();
    assert_eq!(select_alpha(&m, &[0.2, 0.9, 0.5], 101).unwrap().0, 0.9);
}

fn degenerate_model(eta: f64) -> FittedTaag {
    // d = 1, w = 1 and equal length-scales make the additive and product
    // Grams identical, so the diagnostic density reduces to eta^delta (1 - eta).
    let data = unit_dataset(vec![vec![0.1], vec![0.45], vec![0.8]], vec![1.0, 3.0, 2.0]);
    let kp = KernelParams::new(vec![1.0], vec![0.3], vec![0.3]).unwrap();
    let p = TaagParams::new(1.0, 2.0, 1.0, eta, kp).unwrap();
    FittedTaag::condition(data, p, ModelVariant::Taag, BASE_NUGGET).unwrap()
}

#[test]
fn diagnostic_matches_beta_two_two() {
    let m = degenerate_model(0.5);
    let cfg = DiagnosticConfig {
        n_is: 10_000,
        ..DiagnosticConfig::default()
    };
    let xi = eta_diagnostic(&m, &cfg, RngState::new(1)).unwrap();
    let want = 1.0 - (3.0 * 0.4f64.powi(2) - 2.0 * 0.4f64.powi(3));
    assert!((xi - want).abs() < 0.02, "{xi} vs {want}");
    let t0 = DiagnosticConfig { threshold: 0.0, ..cfg.clone() };
    assert_eq!(eta_diagnostic(&m, &t0, RngState::new(1)).unwrap(), 1.0);
    let t1 = DiagnosticConfig { threshold: 1.0, ..cfg };
    assert_eq!(eta_diagnostic(&m, &t1, RngState::new(1)).unwrap(), 0.0);
}

#[test]
fn branch_follows_the_threshold_rule() {
    for seed in 0..3 {
        let m = fitted_nonadditive(seed);
        let cfg = DiagnosticConfig::default();
        let r = bomm_plus_with_model(&m, &cfg, RngState::new(seed)).unwrap();
        let xi = r.xi.unwrap();
        assert!((0.0..=1.0).contains(&xi));
        assert_eq!(r.branch, Some(choose_branch(xi, cfg.rho)));
        match r.branch.unwrap() {
            Branch::Bomm => {
                assert_eq!(r.alpha_star, None);
                assert_eq!(r.x_hat, bomm(&m, cfg.grid_size).unwrap().x_hat);
            }
            Branch::Tail => {
                let (alpha, x) = select_alpha(&m, &cfg.alpha_grid, cfg.grid_size).unwrap();
                assert_eq!((r.alpha_star, &r.x_hat), (Some(alpha), &x));
            }
        }
    }
}

struct Bowl {
    fail_after: Option<usize>,
    calls: std::sync::atomic::AtomicUsize,
}

impl Objective for Bowl {
    fn domain(&self) -> Domain {
        Domain::unit(3)
    }

    fn evaluate(&self, x: &[f64]) -> bomm::Result<f64> {
        let c = self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        if self.fail_after.is_some_and(|k| c >= k) {
            return Err(BommError::Evaluation("simulator crashed".into()));
        }
        Ok(1.0 + x.iter().map(|v| (v - 0.6).powi(2)).sum::<f64>())
    }
}

fn small_fit() -> FitConfig {
    FitConfig {
        starts: 3,
        cycles: 3,
        ..FitConfig::default()
    }
}

#[test]
fn sequential_batches_respect_the_budget() {
    let obj = Bowl {
        fail_after: None,
        calls: Default::default(),
    };
    let batch = BatchConfig {
        n_ini: 10,
        b: 1,
        budget: 14,
        maximin_iters: Some(200),
    };
    let t = batch_bomm_plus(&obj, &batch, &DiagnosticConfig::default(), &small_fit(), RngState::new(3)).unwrap();
    assert_eq!(t.steps.len(), 4);
    assert_eq!(t.evaluations, 14);
    assert_eq!(obj.calls.load(std::sync::atomic::Ordering::SeqCst), 14);
    assert!(t.steps.windows(2).all(|w| w[1].best_value <= w[0].best_value));

    let partial = BatchConfig {
        n_ini: 10,
        b: 3,
        budget: 15,
        maximin_iters: Some(200),
    };
    let obj = Bowl {
        fail_after: None,
        calls: Default::default(),
    };
    let t = batch_bomm_plus(&obj, &partial, &DiagnosticConfig::default(), &small_fit(), RngState::new(3)).unwrap();
    assert_eq!(t.steps.iter().map(|s| s.evaluations).collect::<Vec<_>>(), vec![13, 15]);
}

#[test]
fn failed_evaluation_returns_partial_trajectory() {
    let obj = Bowl {
        fail_after: Some(12),
        calls: Default::default(),
    };
    let batch = BatchConfig {
        n_ini: 10,
        b: 2,
        budget: 20,
        maximin_iters: Some(200),
    };
    let t = batch_bomm_plus(&obj, &batch, &DiagnosticConfig::default(), &small_fit(), RngState::new(4)).unwrap();
    assert!(t.aborted.as_deref().unwrap().contains("simulator crashed"));
    assert_eq!(t.evaluations, 12);
    assert_eq!(t.data.len(), 12);
    let bad = BatchConfig {
        n_ini: 10,
        b: 0,
        budget: 20,
        maximin_iters: None,
    };
    assert!(batch_bomm_plus(&obj, &bad, &DiagnosticConfig::default(), &small_fit(), RngState::new(4)).is_err());
}

mod winner {
    use super::{pick_the_winner, random_points, unit_dataset, RngState};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn winner_is_invariant_to_increasing_maps(seed in any::<u64>(), n in 1usize..30, a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let mut rng = RngState::new(seed).rng();
            let pts = random_points(&mut rng, n, 2);
            let y: Vec<f64> = (0..n).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            let mapped: Vec<f64> = y.iter().map(|v| (a * v + b).exp()).collect();
            let r1 = pick_the_winner(&unit_dataset(pts.clone(), y.clone())).unwrap();
            let r2 = pick_the_winner(&unit_dataset(pts.clone(), mapped)).unwrap();
            prop_assert_eq!(&r1.x_hat, &r2.x_hat);
            let best = y.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(r1.f_at_x_hat, Some(best));
            prop_assert!(pts.contains(&r1.x_hat));
        }
    }
}
