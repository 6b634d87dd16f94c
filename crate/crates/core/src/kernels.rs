//! Squared-exponential kernel algebra for the additive/product mixture.
//!
//! `r_A(x, y) = sum_l w_l exp(-((x_l - y_l) / theta_A_l)^2)` and
//! `r_Z(x, y) = exp(-sum_l ((x_l - y_l) / theta_Z_l)^2)`, mixed as
//! `(1 - eta) r_A + eta r_Z`. Length-scales live in unit-cube units.

use log::warn;
use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{BommError, Result};

pub const BASE_NUGGET: f64 = 1e-8;
pub const MAX_NUGGET: f64 = 1e-4;

/// Bounds on length-scales during fitting.
pub const THETA_RANGE: (f64, f64) = (1e-2, 10.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub w: Vec<f64>,
    pub theta_a: Vec<f64>,
    pub theta_z: Vec<f64>,
}

impl KernelParams {
    pub fn new(w: Vec<f64>, theta_a: Vec<f64>, theta_z: Vec<f64>) -> Result<Self> {
        let p = KernelParams { w, theta_a, theta_z };
        p.validate()?;
        Ok(p)
    }

    /// Equal weights and a common length-scale.
    pub fn isotropic(d: usize, theta: f64) -> Self {
        KernelParams {
            w: vec![1.0 / d as f64; d],
            theta_a: vec![theta; d],
            theta_z: vec![theta; d],
        }
    }

    pub fn dims(&self) -> usize {
        self.w.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w.len();
        if d == 0 || self.theta_a.len() != d || self.theta_z.len() != d {
            return Err(BommError::InvalidParameter(format!(
                "kernel parameter lengths differ: w={} theta_a={} theta_z={}",
                d,
                self.theta_a.len(),
                self.theta_z.len()
            )));
        }
        if self.w.iter().any(|&w| !(w >= 0.0)) {
            return Err(BommError::InvalidParameter("additive weights must be >= 0".into()));
        }
        let s: f64 = self.w.iter().sum();
        if (s - 1.0).abs() > 1e-10 {
            return Err(BommError::InvalidParameter(format!(
                "additive weights must sum to 1, got {s}"
            )));
        }
        if self
            .theta_a
            .iter()
            .chain(&self.theta_z)
            .any(|&t| !(t > 0.0 && t.is_finite()))
        {
            return Err(BommError::InvalidParameter("length-scales must be positive".into()));
        }
        Ok(())
    }
}

pub fn r_additive(x: &[f64], y: &[f64], p: &KernelParams) -> f64 {
    x.iter()
        .zip(y)
        .zip(p.w.iter().zip(&p.theta_a))
        .map(|((a, b), (w, t))| w * (-((a - b) / t).powi(2)).exp())
        .sum()
}

pub fn r_product(x: &[f64], y: &[f64], p: &KernelParams) -> f64 {
    let s: f64 = x
        .iter()
        .zip(y)
        .zip(&p.theta_z)
        .map(|((a, b), t)| ((a - b) / t).powi(2))
        .sum();
    (-s).exp()
}

pub fn r_mixture(x: &[f64], y: &[f64], eta: f64, p: &KernelParams) -> f64 {
    mix(eta, r_additive(x, y, p), r_product(x, y, p))
}

#[inline]
pub(crate) fn mix(eta: f64, a: f64, z: f64) -> f64 {
    // Exact endpoints keep eta = 0 / eta = 1 free of the other kernel.
    if eta == 0.0 {
        a
    } else if eta == 1.0 {
        z
    } else {
        (1.0 - eta) * a + eta * z
    }
}

/// `R_A` and `R_Z` over a design (unit diagonal, no nugget).
pub fn gram_parts(points: &[Vec<f64>], p: &KernelParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = points.len();
    let mut ra = DMatrix::<f64>::identity(n, n);
    let mut rz = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = r_additive(&points[i], &points[j], p);
            let z = r_product(&points[i], &points[j], p);
            ra[(i, j)] = a;
            ra[(j, i)] = a;
            rz[(i, j)] = z;
            rz[(j, i)] = z;
        }
    }
    (ra, rz)
}

/// `(1 - eta) R_A + eta R_Z + nugget I`.
pub fn gram_mixture(points: &[Vec<f64>], eta: f64, p: &KernelParams, nugget: f64) -> DMatrix<f64> {
    let (ra, rz) = gram_parts(points, p);
    combine(&ra, &rz, eta, nugget)
}

pub fn combine(ra: &DMatrix<f64>, rz: &DMatrix<f64>, eta: f64, nugget: f64) -> DMatrix<f64> {
    let n = ra.nrows();
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            m[(i, j)] = mix(eta, ra[(i, j)], rz[(i, j)]);
        }
        m[(j, j)] += nugget;
    }
    m
}

/// Cholesky of `gram + nugget I`, escalating the nugget x10 from `base`
/// up to [`MAX_NUGGET`]. `gram` must not already contain a nugget.
pub fn factorize(gram: &DMatrix<f64>, base: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut nugget = base.max(0.0);
    loop {
        let mut m = gram.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += nugget;
        }
        if let Some(ch) = Cholesky::new(m) {
            if nugget > base {
                warn!("Gram matrix needed nugget {nugget:e} (base {base:e})");
            }
            return Ok((ch, nugget));
        }
        if nugget >= MAX_NUGGET {
            return Err(BommError::Conditioning { nugget });
        }
        nugget = if nugget == 0.0 { BASE_NUGGET } else { (nugget * 10.0).min(MAX_NUGGET) };
    }
}

/// `r_A` and `r_Z` between `x_new` and every design row.
pub fn cross_vectors(points: &[Vec<f64>], x_new: &[f64], p: &KernelParams) -> (Vec<f64>, Vec<f64>) {
    points
        .iter()
        .map(|xi| (r_additive(xi, x_new, p), r_product(xi, x_new, p)))
        .unzip()
}

/// Per-dimension squared differences of all design pairs, reused across
/// likelihood evaluations.
#[derive(Debug, Clone)]
pub struct PairwiseSq {
    n: usize,
    d: usize,
    /// Row-major `[pair][dim]` for `i < j`.
    sq: Vec<f64>,
}

impl PairwiseSq {
    pub fn new(points: &[Vec<f64>]) -> Self {
        let n = points.len();
        let d = points.first().map_or(0, |p| p.len());
        let mut sq = Vec::with_capacity(n * n.saturating_sub(1) / 2 * d);
        for i in 0..n {
            for j in (i + 1)..n {
                sq.extend(points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)));
            }
        }
        PairwiseSq { n, d, sq }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Builds the mixture Gram (without nugget). Skips whichever kernel has
    /// zero weight.
    pub fn mixture(&self, eta: f64, p: &KernelParams) -> DMatrix<f64> {
        let (n, d) = (self.n, self.d);
        let inv_a: Vec<f64> = p.theta_a.iter().map(|t| 1.0 / (t * t)).collect();
        let inv_z: Vec<f64> = p.theta_z.iter().map(|t| 1.0 / (t * t)).collect();
        let mut m = DMatrix::<f64>::identity(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                let row = &self.sq[k * d..(k + 1) * d];
                let a = if eta < 1.0 {
                    row.iter()
                        .zip(&inv_a)
                        .zip(&p.w)
                        .map(|((s, ia), w)| w * (-s * ia).exp())
                        .sum()
                } else {
                    0.0
                };
                let z = if eta > 0.0 {
                    (-row.iter().zip(&inv_z).map(|(s, iz)| s * iz).sum::<f64>()).exp()
                } else {
                    0.0
                };
                let v = mix(eta, a, z);
                m[(i, j)] = v;
                m[(j, i)] = v;
                k += 1;
            }
        }
        m
    }
}
