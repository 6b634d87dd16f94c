mod common;

use bomm::kernels::{KernelParams, BASE_NUGGET};
use bomm::marginal::{marginal_mean, marginal_mean_objective, marginal_variance, tail_mean};
use bomm::{Dataset, DesignMatrix, Domain, FittedTaag, ModelVariant, RngState, TaagParams};
use common::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Posterior mean of `h` integrated over every coordinate but `l` of the unit
/// cube, by an `m`-node Gauss-Legendre tensor rule.
fn mean_integral(gp: &DenseGp, l: usize, x_l: f64, m: usize) -> f64 {
    let d = gp.points[0].len();
    let n = gp.points.len();
    let (t, w) = gauss_legendre(m, 0.0, 1.0);
    let others: Vec<usize> = (0..d).filter(|&k| k != l).collect();
    let ea = |k: usize, i: usize, v: f64| (-((v - gp.points[i][k]) / gp.kernel.theta_a[k]).powi(2)).exp();
    let ez = |k: usize, i: usize, v: f64| (-((v - gp.points[i][k]) / gp.kernel.theta_z[k]).powi(2)).exp();
    // tables[o][i][j]: factor of design point i at node j of the o-th free coordinate.
    let ta: Vec<Vec<Vec<f64>>> = others
        .iter()
        .map(|&k| (0..n).map(|i| t.iter().map(|&v| ea(k, i, v)).collect()).collect())
        .collect();
    let tz: Vec<Vec<Vec<f64>>> = others
        .iter()
        .map(|&k| (0..n).map(|i| t.iter().map(|&v| ez(k, i, v)).collect()).collect())
        .collect();
    let eta = gp.eta;
    let mut total = 0.0;
    let mut idx = vec![0usize; others.len()];
    loop {
        let weight: f64 = idx.iter().map(|&j| w[j]).product();
        let mut s = 0.0;
        for i in 0..n {
            let mut add = gp.kernel.w[l] * ea(l, i, x_l);
            let mut prod = ez(l, i, x_l);
            for (o, &k) in others.iter().enumerate() {
                add += gp.kernel.w[k] * ta[o][i][idx[o]];
                prod *= tz[o][i][idx[o]];
            }
            s += gp.weights[i] * ((1.0 - eta) * add + eta * prod);
        }
        total += weight * (gp.mu + s);
        let mut c = 0;
        loop {
            if c == idx.len() {
                return total;
            }
            idx[c] += 1;
            if idx[c] < m {
                break;
            }
            idx[c] = 0;
            c += 1;
        }
    }
}

/// Posterior variance of the integral over the free coordinates, as a double
/// tensor-rule sum of the posterior covariance.
fn variance_integral(gp: &DenseGp, l: usize, x_l: f64, m: usize) -> f64 {
    let d = gp.points[0].len();
    let bounds: Vec<(f64, f64)> = (0..d).filter(|&k| k != l).map(|_| (0.0, 1.0)).collect();
    let rule = tensor_rule(m, &bounds);
    let full = |p: &[f64]| {
        let mut x = p.to_vec();
        x.insert(l, x_l);
        x
    };
    let pts: Vec<(Vec<f64>, f64)> = rule.into_iter().map(|(p, w)| (full(&p), w)).collect();
    let cross: Vec<nalgebra::DVector<f64>> = pts.iter().map(|(x, _)| gp.cross(x)).collect();
    let solved: Vec<nalgebra::DVector<f64>> = cross.iter().map(|c| &gp.kinv * c).collect();
    let mut s = 0.0;
    for (a, (xa, wa)) in pts.iter().enumerate() {
        for (b, (xb, wb)) in pts.iter().enumerate() {
            s += wa * wb * (kernel(xa, xb, gp.eta, &gp.kernel) - cross[a].dot(&solved[b]));
        }
    }
    gp.sigma2 * s
}

fn instance(rng: &mut ChaCha8Rng, n: usize, d: usize, eta: f64) -> (FittedTaag, DenseGp) {
    let pts = random_points(rng, n, d);
    let y: Vec<f64> = (0..n).map(|_| 1.0 + 3.0 * rng.random::<f64>()).collect();
    let kp = random_kernel(rng, d, 0.1, 1.5);
    let lambda = rng.random::<f64>();
    let (mu, sigma2) = (0.2, 1.0 + rng.random::<f64>());
    let p = TaagParams::new(lambda, mu, sigma2, eta, kp.clone()).unwrap();
    let m = FittedTaag::condition(unit_dataset(pts.clone(), y), p, ModelVariant::Taag, BASE_NUGGET).unwrap();
    let gp = DenseGp::new(pts, m.latent(), eta, kp, mu, sigma2, m.nugget());
    (m, gp)
}

#[test]
fn mean_matches_tensor_quadrature() {
    let mut rng = RngState::new(21).rng();
    for case in 0..12 {
        let eta = [0.0, 0.3, 0.7][case % 3];
        let d = 2 + case % 3;
        let n = rng.random_range(1..=10);
        let (model, gp) = instance(&mut rng, n, d, eta);
        for l in 0..d {
            let xs = [0.0, rng.random::<f64>(), rng.random::<f64>(), 1.0];
            let q: Vec<f64> = xs.iter().map(|&x| mean_integral(&gp, l, x, 64)).collect();
            let obj: Vec<f64> = xs.iter().map(|&x| marginal_mean_objective(&model, l, x).unwrap()).collect();
            for (k, &x) in xs.iter().enumerate() {
                let full = marginal_mean(&model, l, x).unwrap();
                assert!((full - q[k]).abs() <= 1e-6 * q[k].abs().max(1e-3), "full {full} vs {}", q[k]);
                // The objective drops x_l-free constants: compare offsets.
                let off = (q[k] - obj[k]) - (q[0] - obj[0]);
                assert!(off.abs() <= 1e-6 * q[k].abs().max(q[0].abs()), "case {case} l {l}: {off}");
            }
        }
    }
}

#[test]
fn variance_matches_double_quadrature() {
    let mut rng = RngState::new(22).rng();
    for case in 0..6 {
        let eta = [0.0, 0.3, 0.7][case % 3];
        let (d, m) = if case < 3 { (2, 64) } else { (3, 24) };
        let (model, gp) = instance(&mut rng, 6, d, eta);
        for l in 0..d {
            for x in [0.1, rng.random::<f64>(), 0.95] {
                let got = marginal_variance(&model, l, x).unwrap();
                let want = variance_integral(&gp, l, x, m).max(0.0);
                assert!(
                    (got - want).abs() <= 1e-5 * want + 1e-9 * gp.sigma2,
                    "case {case} l {l} x {x}: {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn general_box_scales_by_the_free_volume() {
    // d = 2 on [0, 4] x [-1, 2]: integrate the posterior mean over the second
    // coordinate in original units.
    let dom = Domain::new(vec![0.0, -1.0], vec![4.0, 2.0]).unwrap();
    let pts = vec![vec![1.0, 0.0], vec![3.0, 1.5], vec![2.0, -0.5]];
    let data = Dataset::new(dom, DesignMatrix::new(2, pts).unwrap(), vec![2.0, 5.0, 3.0]).unwrap();
    let kp = KernelParams::new(vec![0.3, 0.7], vec![0.4, 0.6], vec![0.5, 0.3]).unwrap();
    let m = FittedTaag::condition(data, TaagParams::new(0.5, 1.0, 1.5, 0.4, kp).unwrap(), ModelVariant::Taag, BASE_NUGGET).unwrap();
    let (nodes, weights) = gauss_legendre(64, -1.0, 2.0);
    for x0 in [0.0, 1.3, 4.0] {
        let q: f64 = nodes
            .iter()
            .zip(&weights)
            .map(|(&v, &w)| w * m.posterior_h(&[x0, v]).unwrap().0)
            .sum();
        let got = marginal_mean(&m, 0, x0).unwrap();
        assert!((got - q).abs() < 1e-9 * q.abs().max(1.0), "{got} vs {q}");
    }
}

#[test]
fn tail_mean_matches_monte_carlo() {
    let mut rng = RngState::new(23).rng();
    let (model, _) = instance(&mut rng, 5, 3, 0.5);
    let mut draws = vec![0.0; 1_000_000];
    for (l, x, alpha) in [(0, 0.3, 0.2), (1, 0.8, 0.5), (2, 0.05, 0.05)] {
        let mean = marginal_mean(&model, l, x).unwrap();
        let sd = marginal_variance(&model, l, x).unwrap().sqrt();
        for v in draws.iter_mut() {
            *v = mean + sd * standard_normal(&mut rng);
        }
        draws.sort_by(f64::total_cmp);
        let k = (alpha * draws.len() as f64) as usize;
        let mc = draws[..k].iter().sum::<f64>() / k as f64;
        let got = tail_mean(&model, l, x, alpha).unwrap();
        assert!((got - mc).abs() < 1e-2 * sd.max(1e-3), "{got} vs {mc} (sd {sd})");
    }
}

#[test]
fn tail_mean_at_one_half() {
    let mut rng = RngState::new(24).rng();
    let (model, _) = instance(&mut rng, 4, 2, 0.3);
    let mean = marginal_mean(&model, 0, 0.4).unwrap();
    let var = marginal_variance(&model, 0, 0.4).unwrap();
    let got = tail_mean(&model, 0, 0.4, 0.5).unwrap();
    assert!((got - (mean - var.sqrt() * 0.797_884_560_802_865_4)).abs() < 1e-10);
}

#[test]
fn variance_shrinks_on_nested_designs() {
    let mut rng = RngState::new(25).rng();
    let all = random_points(&mut rng, 80, 2);
    let y: Vec<f64> = all.iter().map(|x| 1.0 + (x[0] - 0.4).powi(2) + x[1]).collect();
    let kp = KernelParams::new(vec![0.5, 0.5], vec![0.3, 0.3], vec![0.3, 0.3]).unwrap();
    let mut prev = f64::INFINITY;
    for n in [0, 5, 20, 80] {
        let data = if n == 0 {
            Dataset::new(Domain::unit(2), DesignMatrix::empty(2), vec![]).unwrap()
        } else {
            unit_dataset(all[..n].to_vec(), y[..n].to_vec())
        };
        let p = TaagParams::new(1.0, 1.0, 1.0, 0.3, kp.clone()).unwrap();
        let m = FittedTaag::condition(data, p, ModelVariant::Taag, 1e-6).unwrap();
        let v = marginal_variance(&m, 0, 0.5).unwrap();
        assert!(v < prev, "n={n}: {v} !< {prev}");
        prev = v;
    }
    assert!(prev < 1e-3);
}
