//! Marginal posteriors of the latent `h` obtained by integrating out all
//! coordinates but one, their closed forms for squared-exponential kernels,
//! lower-tail means, and 1-d grid search.
//!
//! Everything is computed on the unit cube where the kernels live and then
//! rescaled: integrating over `X_{-l}` in original units multiplies a
//! unit-cube integral by `Vol(X_{-l})`, and a double integral by its square.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use statrs::function::erf::erf;

use crate::error::{BommError, Result};
use crate::taag::FittedTaag;

/// Default number of grid points per coordinate.
pub const DEFAULT_GRID: usize = 1001;

const SQRT_PI: f64 = 1.772_453_850_905_516;

/// `int_0^1 exp(-((s - u) / theta)^2) ds`.
pub(crate) fn gauss_int(u: f64, theta: f64) -> f64 {
    0.5 * SQRT_PI * theta * (erf((1.0 - u) / theta) + erf(u / theta))
}

/// `int_0^1 int_0^1 exp(-((s - s') / theta)^2) ds ds'`.
pub(crate) fn gauss_double_int(theta: f64) -> f64 {
    let r = 1.0 / theta;
    theta * SQRT_PI * erf(r) - theta * theta * (-(-r * r).exp_m1())
}

/// Per-observation constants of the marginalized cross-covariances.
struct Terms {
    /// `c[l][i] = sum_{k != l} w_k int exp(-((s - u_ik) / theta_A,k)^2) ds`
    c: Vec<Vec<f64>>,
    /// `p[l][i] = prod_{j != l} int exp(-((s - u_ij) / theta_Z,j)^2) ds`
    p: Vec<Vec<f64>>,
    /// Unit-cube double integral of the prior correlation over `X_{-l}`.
    prior: Vec<f64>,
}

impl Terms {
    fn new(model: &FittedTaag) -> Terms {
        let kp = &model.params().kernel;
        let pts = model.data().unit_points();
        let d = kp.dims();
        let eta = model.params().eta;
        let ia: Vec<Vec<f64>> = pts
            .iter()
            .map(|u| (0..d).map(|j| kp.w[j] * gauss_int(u[j], kp.theta_a[j])).collect())
            .collect();
        let iz: Vec<Vec<f64>> = pts
            .iter()
            .map(|u| (0..d).map(|j| gauss_int(u[j], kp.theta_z[j])).collect())
            .collect();
        let ga: Vec<f64> = kp.theta_a.iter().map(|&t| gauss_double_int(t)).collect();
        let gz: Vec<f64> = kp.theta_z.iter().map(|&t| gauss_double_int(t)).collect();
        let mut c = vec![Vec::with_capacity(pts.len()); d];
        let mut p = vec![Vec::with_capacity(pts.len()); d];
        let mut prior = Vec::with_capacity(d);
        for l in 0..d {
            for i in 0..pts.len() {
                c[l].push((0..d).filter(|&k| k != l).map(|k| ia[i][k]).sum());
                p[l].push((0..d).filter(|&j| j != l).map(|j| iz[i][j]).product());
            }
            let add = kp.w[l] + (0..d).filter(|&k| k != l).map(|k| kp.w[k] * ga[k]).sum::<f64>();
            let prod: f64 = (0..d).filter(|&j| j != l).map(|j| gz[j]).product();
            prior.push(mix(eta, add, prod));
        }
        Terms { c, p, prior }
    }
}

fn mix(eta: f64, a: f64, z: f64) -> f64 {
    if eta == 0.0 {
        a
    } else if eta == 1.0 {
        z
    } else {
        (1.0 - eta) * a + eta * z
    }
}

fn check_dim(model: &FittedTaag, l: usize, x_l: f64) -> Result<f64> {
    let dom = model.data().domain();
    if l >= dom.dims() {
        return Err(BommError::InvalidParameter(format!("dimension {l} out of range for d={}", dom.dims())));
    }
    let (lo, hi) = (dom.lower()[l], dom.upper()[l]);
    if !(x_l >= lo && x_l <= hi) {
        return Err(BommError::DomainViolation {
            dim: l,
            value: x_l,
            lower: lo,
            upper: hi,
        });
    }
    Ok(dom.scale_coord(l, x_l))
}

/// Gaussian bumps `exp(-((t - u_il) / theta_A,l)^2)` and the same with `theta_Z,l`.
fn bumps(model: &FittedTaag, l: usize, t: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
    let kp = &model.params().kernel;
    let (ta, tz) = (kp.theta_a[l], kp.theta_z[l]);
    model.data().unit_points().iter().map(move |u| {
        let s = t - u[l];
        ((-(s / ta).powi(2)).exp(), (-(s / tz).powi(2)).exp())
    })
}

/// `a_i(t)`: the unit-cube integral over `X_{-l}` of the mixed cross-correlation.
fn cross_integrals(model: &FittedTaag, terms: &Terms, l: usize, t: f64) -> Vec<f64> {
    let eta = model.params().eta;
    let wl = model.params().kernel.w[l];
    bumps(model, l, t)
        .enumerate()
        .map(|(i, (ea, ez))| mix(eta, wl * ea + terms.c[l][i], terms.p[l][i] * ez))
        .collect()
}

/// The `x_l`-dependent part of the marginal posterior mean of `h`:
/// `Vol(X_{-l}) sum_i q_i [(1 - eta) w_l e_A,il(x_l) + eta p_il e_Z,il(x_l)]`.
/// Constant terms (`mu Vol(X_{-l})` and the other additive components) are
/// dropped; they do not affect the argmin.
pub fn marginal_mean_objective(model: &FittedTaag, l: usize, x_l: f64) -> Result<f64> {
    let t = check_dim(model, l, x_l)?;
    let terms = Terms::new(model);
    let eta = model.params().eta;
    let wl = model.params().kernel.w[l];
    let q = model.q();
    let s: f64 = bumps(model, l, t)
        .enumerate()
        .map(|(i, (ea, ez))| q[i] * mix(eta, wl * ea, terms.p[l][i] * ez))
        .sum();
    Ok(model.data().domain().volume_excluding(l) * s)
}

/// Full marginal posterior mean `int h(x) dx_{-l}` including constants.
pub fn marginal_mean(model: &FittedTaag, l: usize, x_l: f64) -> Result<f64> {
    let t = check_dim(model, l, x_l)?;
    let terms = Terms::new(model);
    let a = cross_integrals(model, &terms, l, t);
    let s: f64 = a.iter().zip(model.q().iter()).map(|(a, q)| a * q).sum();
    Ok(model.data().domain().volume_excluding(l) * (model.params().mu + s))
}

/// Posterior variance of `int h(x) dx_{-l}`, clamped at 0.
pub fn marginal_variance(model: &FittedTaag, l: usize, x_l: f64) -> Result<f64> {
    let t = check_dim(model, l, x_l)?;
    let terms = Terms::new(model);
    let a = nalgebra::DVector::from_vec(cross_integrals(model, &terms, l, t));
    let quad = if a.is_empty() { 0.0 } else { a.dot(&model.solve(&a)) };
    let vol = model.data().domain().volume_excluding(l);
    let v = model.params().sigma2 * (terms.prior[l] - quad);
    if v < 0.0 {
        model.count_clamp();
        return Ok(0.0);
    }
    Ok(vol * vol * v)
}

/// Normal lower-tail quantities for level `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailParams {
    pub alpha: f64,
    pub z_alpha: f64,
    pub phi_z: f64,
}

impl TailParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(BommError::InvalidParameter(format!("alpha must be in (0, 1], got {alpha}")));
        }
        if alpha == 1.0 {
            return Ok(TailParams {
                alpha,
                z_alpha: f64::INFINITY,
                phi_z: 0.0,
            });
        }
        let n = Normal::standard();
        let z = n.inverse_cdf(alpha);
        Ok(TailParams {
            alpha,
            z_alpha: z,
            phi_z: n.pdf(z),
        })
    }

    /// `phi(z_alpha) / alpha`; exactly 0 at `alpha = 1`.
    pub fn factor(&self) -> f64 {
        self.phi_z / self.alpha
    }

    /// `mean - sd * phi(z_alpha) / alpha`, returning `mean` untouched when the factor is 0.
    pub fn apply(&self, mean: f64, var: f64) -> f64 {
        let f = self.factor();
        if f == 0.0 {
            mean
        } else {
            mean - var.max(0.0).sqrt() * f
        }
    }
}

/// Lower-`alpha` tail mean of the marginal posterior at `x_l`.
pub fn tail_mean(model: &FittedTaag, l: usize, x_l: f64, alpha: f64) -> Result<f64> {
    let tp = TailParams::new(alpha)?;
    let m = marginal_mean(model, l, x_l)?;
    if tp.factor() == 0.0 {
        return Ok(m);
    }
    Ok(tp.apply(m, marginal_variance(model, l, x_l)?))
}

/// Uniform grid of `grid_size` points on `[a, b]`, both endpoints included.
pub fn uniform_grid(a: f64, b: f64, grid_size: usize) -> Vec<f64> {
    let m = (grid_size - 1) as f64;
    (0..grid_size)
        .map(|g| if g + 1 == grid_size { b } else { a + (b - a) * g as f64 / m })
        .collect()
}

/// Index of the smallest value; NaN counts as `+inf`, ties go to the first.
pub fn argmin_index(values: &[f64]) -> usize {
    let mut best = 0;
    let mut bv = f64::INFINITY;
    for (i, &v) in values.iter().enumerate() {
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if v < bv {
            bv = v;
            best = i;
        }
    }
    best
}

/// Grid minimizer of `objective` on `interval`; ties go to the smallest coordinate.
pub fn argmin_1d<F: Fn(f64) -> f64>(objective: F, interval: (f64, f64), grid_size: usize) -> Result<f64> {
    if grid_size < 2 {
        return Err(BommError::InvalidParameter(format!("grid_size must be >= 2, got {grid_size}")));
    }
    let (a, b) = interval;
    if !(a.is_finite() && b.is_finite() && a <= b) {
        return Err(BommError::InvalidParameter(format!("invalid interval [{a}, {b}]")));
    }
    let grid = uniform_grid(a, b, grid_size);
    let vals: Vec<f64> = grid.iter().map(|&x| objective(x)).collect();
    Ok(grid[argmin_index(&vals)])
}

/// Marginal mean and variance of one coordinate tabulated on a grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginalPosterior {
    pub dim_index: usize,
    /// Grid in original units.
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of grid variances clamped at 0.
    pub clamped: usize,
}

impl MarginalPosterior {
    pub fn new(model: &FittedTaag, l: usize, grid_size: usize) -> Result<Self> {
        check_dim(model, l, model.data().domain().lower()[l])?;
        let terms = Terms::new(model);
        Self::with_terms(model, &terms, l, grid_size)
    }

    fn with_terms(model: &FittedTaag, terms: &Terms, l: usize, grid_size: usize) -> Result<Self> {
        if grid_size < 2 {
            return Err(BommError::InvalidParameter(format!("grid_size must be >= 2, got {grid_size}")));
        }
        let dom = model.data().domain();
        let unit = uniform_grid(0.0, 1.0, grid_size);
        let grid: Vec<f64> = unit.iter().map(|&t| dom.unscale_coord(l, t)).collect();
        let n = model.data().len();
        let p = model.params();
        let vol = dom.volume_excluding(l);
        if n == 0 {
            let v = vol * vol * p.sigma2 * terms.prior[l];
            return Ok(MarginalPosterior {
                dim_index: l,
                grid,
                mean: vec![vol * p.mu; grid_size],
                var: vec![v; grid_size],
                clamped: 0,
            });
        }
        let mut a = DMatrix::<f64>::zeros(n, grid_size);
        for (g, &t) in unit.iter().enumerate() {
            let col = cross_integrals(model, terms, l, t);
            a.column_mut(g).copy_from_slice(&col);
        }
        let mean: Vec<f64> = (0..grid_size)
            .map(|g| vol * (p.mu + a.column(g).dot(model.q())))
            .collect();
        let l_factor = model.chol().l_dirty().clone();
        let v = l_factor
            .solve_lower_triangular(&a)
            .ok_or(BommError::Conditioning { nugget: model.nugget() })?;
        let mut clamped = 0;
        let var: Vec<f64> = (0..grid_size)
            .map(|g| {
                let raw = p.sigma2 * (terms.prior[l] - v.column(g).norm_squared());
                if raw < 0.0 {
                    clamped += 1;
                    model.count_clamp();
                    0.0
                } else {
                    vol * vol * raw
                }
            })
            .collect();
        Ok(MarginalPosterior {
            dim_index: l,
            grid,
            mean,
            var,
            clamped,
        })
    }

    /// Tail mean at every grid point.
    pub fn tail(&self, tp: &TailParams) -> Vec<f64> {
        self.mean.iter().zip(&self.var).map(|(&m, &v)| tp.apply(m, v)).collect()
    }

    pub fn argmin_mean(&self) -> f64 {
        self.grid[argmin_index(&self.mean)]
    }

    pub fn argmin_tail(&self, tp: &TailParams) -> f64 {
        self.grid[argmin_index(&self.tail(tp))]
    }
}

/// Marginal posteriors of every coordinate, computed in parallel.
pub fn marginal_posteriors(model: &FittedTaag, grid_size: usize) -> Result<Vec<MarginalPosterior>> {
    let terms = Terms::new(model);
    (0..model.data().dims())
        .into_par_iter()
        .map(|l| MarginalPosterior::with_terms(model, &terms, l, grid_size))
        .collect()
}

/// CSV of `l, x_l, mean, var, tail_mean` for plotting marginal profiles.
pub fn write_trace<W: Write>(profiles: &[MarginalPosterior], tp: &TailParams, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["l", "x_l", "mean", "var", "tail_mean"])?;
    for mp in profiles {
        for (k, t) in mp.tail(tp).into_iter().enumerate() {
            wr.write_record(&[
                mp.dim_index.to_string(),
                mp.grid[k].to_string(),
                mp.mean[k].to_string(),
                mp.var[k].to_string(),
                t.to_string(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}
