//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use bomm::kernels::KernelParams;
use bomm::{Dataset, DesignMatrix, Domain};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Gauss-Legendre nodes and weights on `[a, b]`, by Newton iteration on the
/// three-term recurrence.
pub fn gauss_legendre(m: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=m {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = 0.5 * (b - a) * x + 0.5 * (b + a);
        weights[i] = 0.5 * (b - a) * w;
    }
    (nodes, weights)
}

/// Tensor product rule over the box `bounds`.
pub fn tensor_rule(m: usize, bounds: &[(f64, f64)]) -> Vec<(Vec<f64>, f64)> {
    let mut out = vec![(Vec::new(), 1.0)];
    for &(a, b) in bounds {
        let (x, w) = gauss_legendre(m, a, b);
        let mut next = Vec::with_capacity(out.len() * m);
        for (p, pw) in &out {
            for (xi, wi) in x.iter().zip(&w) {
                let mut q = p.clone();
                q.push(*xi);
                next.push((q, pw * wi));
            }
        }
        out = next;
    }
    out
}

pub fn kernel_a(x: &[f64], y: &[f64], p: &KernelParams) -> f64 {
    (0..x.len())
        .map(|l| p.w[l] * (-((x[l] - y[l]) / p.theta_a[l]).powi(2)).exp())
        .sum()
}

pub fn kernel_z(x: &[f64], y: &[f64], p: &KernelParams) -> f64 {
    (0..x.len())
        .map(|l| (-((x[l] - y[l]) / p.theta_z[l]).powi(2)).exp())
        .product()
}

pub fn kernel(x: &[f64], y: &[f64], eta: f64, p: &KernelParams) -> f64 {
    (1.0 - eta) * kernel_a(x, y, p) + eta * kernel_z(x, y, p)
}

/// Mixture Gram plus `nugget` on the diagonal, points on the unit cube.
pub fn gram(points: &[Vec<f64>], eta: f64, p: &KernelParams, nugget: f64) -> DMatrix<f64> {
    let n = points.len();
    DMatrix::from_fn(n, n, |i, j| {
        kernel(&points[i], &points[j], eta, p) + if i == j { nugget } else { 0.0 }
    })
}

pub fn boxcox_inverse(lambda: f64, z: f64) -> f64 {
    if lambda == 0.0 {
        z.ln()
    } else {
        (z.powf(lambda) - 1.0) / lambda
    }
}

/// Conditional Gaussian computed from an explicit inverse.
pub struct DenseGp {
    pub points: Vec<Vec<f64>>,
    pub eta: f64,
    pub kernel: KernelParams,
    pub mu: f64,
    pub sigma2: f64,
    pub kinv: DMatrix<f64>,
    pub weights: DVector<f64>,
}

impl DenseGp {
    pub fn new(points: Vec<Vec<f64>>, latent: &[f64], eta: f64, kernel: KernelParams, mu: f64, sigma2: f64, nugget: f64) -> Self {
        let kinv = gram(&points, eta, &kernel, nugget).try_inverse().expect("invertible Gram");
        let r = DVector::from_iterator(latent.len(), latent.iter().map(|z| z - mu));
        let weights = &kinv * r;
        DenseGp {
            points,
            eta,
            kernel,
            mu,
            sigma2,
            kinv,
            weights,
        }
    }

    pub fn cross(&self, u: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.points.len(), self.points.iter().map(|p| kernel(u, p, self.eta, &self.kernel)))
    }

    pub fn mean(&self, u: &[f64]) -> f64 {
        self.mu + self.cross(u).dot(&self.weights)
    }

    pub fn cov(&self, u: &[f64], v: &[f64]) -> f64 {
        let (a, b) = (self.cross(u), self.cross(v));
        self.sigma2 * (kernel(u, v, self.eta, &self.kernel) - a.dot(&(&self.kinv * b)))
    }
}

/// Profiled GLS estimates and log-likelihood from an explicit inverse and an
/// LU determinant.
pub fn dense_profile(latent: &[f64], gram: &DMatrix<f64>) -> (f64, f64, f64) {
    let n = latent.len();
    let kinv = gram.clone().try_inverse().expect("invertible Gram");
    let z = DVector::from_column_slice(latent);
    let one = DVector::from_element(n, 1.0);
    let mu = one.dot(&(&kinv * &z)) / one.dot(&(&kinv * &one));
    let r = z.add_scalar(-mu);
    let sigma2 = r.dot(&(&kinv * &r)) / n as f64;
    let logdet = gram.clone().lu().determinant().ln();
    let nf = n as f64;
    let ll = -0.5 * nf * (2.0 * std::f64::consts::PI * sigma2).ln() - 0.5 * logdet - 0.5 * nf;
    (mu, sigma2, ll)
}

pub fn random_kernel(rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64) -> KernelParams {
    let raw: Vec<f64> = (0..d).map(|_| rng.random::<f64>() + 0.05).collect();
    let s: f64 = raw.iter().sum();
    let w = raw.iter().map(|v| v / s).collect();
    let mut theta = || (0..d).map(|_| (lo.ln() + rng.random::<f64>() * (hi / lo).ln()).exp()).collect();
    let theta_a = theta();
    let theta_z = theta();
    KernelParams::new(w, theta_a, theta_z).unwrap()
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
}

pub fn unit_dataset(points: Vec<Vec<f64>>, y: Vec<f64>) -> Dataset {
    let d = points[0].len();
    Dataset::new(Domain::unit(d), DesignMatrix::new(d, points).unwrap(), y).unwrap()
}

pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Draw of a zero-mean GP with the given mixture kernel at `points`.
pub fn gp_draw(rng: &mut ChaCha8Rng, points: &[Vec<f64>], eta: f64, p: &KernelParams) -> Vec<f64> {
    let k = gram(points, eta, p, 1e-10);
    let l = k.cholesky().expect("positive definite").l();
    let e = DVector::from_iterator(points.len(), (0..points.len()).map(|_| standard_normal(rng)));
    (l * e).iter().copied().collect()
}
