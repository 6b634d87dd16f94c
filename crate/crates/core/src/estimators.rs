//! Optimizer-estimators built on the fitted surrogate: pick-the-winner,
//! surrogate minimization, coordinate-wise marginal-mean and tail-mean
//! minimization, the non-additivity diagnostic on `eta`, and the batch loop.

use std::fmt;
use std::str::FromStr;

use log::{debug, info, warn};
use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RngState};
use crate::design::{augment_batch, maximin_lhd, LhdConfig};
use crate::error::{BommError, Result};
use crate::kernels;
use crate::marginal::{argmin_index, marginal_posteriors, MarginalPosterior, TailParams, DEFAULT_GRID};
use crate::taag::{fit, FitConfig, FittedTaag, ModelVariant};
use crate::testbed::Objective;

/// Smallest admissible tail level.
pub const ALPHA_GUARD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "PW")]
    Pw,
    #[serde(rename = "SBO-SqExp")]
    SboSqExp,
    #[serde(rename = "SBO-TAAG")]
    SboTaag,
    #[serde(rename = "SBO-TAG")]
    SboTag,
    #[serde(rename = "BOMM")]
    Bomm,
    #[serde(rename = "BOMM-TAIL")]
    BommTail,
    #[serde(rename = "BOMM-PLUS")]
    BommPlus,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Pw,
        Method::SboSqExp,
        Method::SboTaag,
        Method::SboTag,
        Method::Bomm,
        Method::BommTail,
        Method::BommPlus,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Method::Pw => "PW",
            Method::SboSqExp => "SBO-SqExp",
            Method::SboTaag => "SBO-TAAG",
            Method::SboTag => "SBO-TAG",
            Method::Bomm => "BOMM",
            Method::BommTail => "BOMM-TAIL",
            Method::BommPlus => "BOMM-PLUS",
        }
    }

    /// Lower-case form used on the command line.
    pub fn cli_name(&self) -> String {
        self.label().to_lowercase()
    }

    /// Surrogate the method needs, if any.
    pub fn model_variant(&self) -> Option<ModelVariant> {
        match self {
            Method::Pw => None,
            Method::SboSqExp => Some(ModelVariant::SqExp),
            Method::SboTag => Some(ModelVariant::Tag),
            _ => Some(ModelVariant::Taag),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = BommError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_lowercase().replace('_', "-");
        let key = match key.as_str() {
            "bomm+" => "bomm-plus".to_string(),
            "bomm-tail-1" => "bomm-tail".to_string(),
            _ => key,
        };
        Method::ALL
            .into_iter()
            .find(|m| m.cli_name() == key)
            .ok_or_else(|| BommError::InvalidParameter(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Bomm,
    Tail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub method: Method,
    pub x_hat: Vec<f64>,
    pub xi: Option<f64>,
    pub alpha_star: Option<f64>,
    pub branch: Option<Branch>,
    pub f_at_x_hat: Option<f64>,
}

impl EstimatorResult {
    fn plain(method: Method, x_hat: Vec<f64>) -> Self {
        EstimatorResult {
            method,
            x_hat,
            xi: None,
            alpha_star: None,
            branch: None,
            f_at_x_hat: None,
        }
    }
}

/// Settings of the non-additivity diagnostic and the marginal searches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticConfig {
    /// Threshold `T` in `P(eta > T | data)`.
    pub threshold: f64,
    /// Significance `rho`; the tail branch is taken when `xi > 1 - rho`.
    pub rho: f64,
    pub n_is: usize,
    pub alpha_grid: Vec<f64>,
    pub grid_size: usize,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        DiagnosticConfig {
            threshold: 0.4,
            rho: 0.3,
            n_is: 2000,
            alpha_grid: default_alpha_grid(),
            grid_size: DEFAULT_GRID,
        }
    }
}

impl DiagnosticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(BommError::InvalidParameter(format!("threshold must be in [0, 1], got {}", self.threshold)));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(BommError::InvalidParameter(format!("rho must be in (0, 1), got {}", self.rho)));
        }
        if self.n_is < 100 {
            return Err(BommError::InvalidParameter(format!("n_is must be >= 100, got {}", self.n_is)));
        }
        if self.grid_size < 2 {
            return Err(BommError::InvalidParameter("grid_size must be >= 2".into()));
        }
        check_alpha_grid(&self.alpha_grid)
    }
}

/// `{0.05, 0.10, ..., 1.0}`.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=20).map(|k| k as f64 / 20.0).collect()
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= ALPHA_GUARD && alpha <= 1.0) {
        return Err(BommError::InvalidParameter(format!(
            "alpha must be in [{ALPHA_GUARD}, 1], got {alpha}"
        )));
    }
    Ok(())
}

fn check_alpha_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(BommError::InvalidParameter("alpha grid is empty".into()));
    }
    grid.iter().try_for_each(|&a| check_alpha(a))
}

/// Best observed point; ties go to the first row.
pub fn pick_the_winner(data: &Dataset) -> Result<EstimatorResult> {
    if data.is_empty() {
        return Err(BommError::InvalidData("pick-the-winner needs at least one observation".into()));
    }
    let i = argmin_index(data.responses());
    let mut r = EstimatorResult::plain(Method::Pw, data.design().row(i).to_vec());
    r.f_at_x_hat = Some(data.responses()[i]);
    Ok(r)
}

/// Multistart coordinate descent on the surrogate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub starts: usize,
    pub sweeps: usize,
    pub grid_size: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            starts: 20,
            sweeps: 200,
            grid_size: DEFAULT_GRID,
        }
    }
}

/// Adds `coef * exp(-((t_g - c) / theta)^2)` for the uniform grid `t_g = g h`.
/// Walks outwards from the peak with a multiplicative recurrence, re-anchoring
/// on a direct evaluation every few steps.
fn add_gauss_row(out: &mut [f64], c: f64, theta: f64, coef: f64) {
    const ANCHOR: usize = 16;
    const TINY: f64 = 1e-300;
    let g_max = out.len() - 1;
    let h = 1.0 / g_max as f64;
    let inv = 1.0 / (theta * theta);
    let k = (-2.0 * h * h * inv).exp();
    let direct = |g: usize| (-((g as f64 * h - c).powi(2)) * inv).exp();
    let g0 = ((c / h).round().max(0.0) as usize).min(g_max);

    let mut e = direct(g0);
    out[g0] += coef * e;
    let mut g = g0;
    let mut r = (-(2.0 * (g0 as f64 * h - c) * h + h * h) * inv).exp();
    while g < g_max {
        g += 1;
        if (g - g0) % ANCHOR == 0 {
            e = direct(g);
            r = (-(2.0 * (g as f64 * h - c) * h + h * h) * inv).exp();
        } else {
            e *= r;
            r *= k;
        }
        if e < TINY {
            break;
        }
        out[g] += coef * e;
    }
    let mut g = g0;
    e = direct(g0);
    let mut r = ((2.0 * (g0 as f64 * h - c) * h - h * h) * inv).exp();
    while g > 0 {
        g -= 1;
        if (g0 - g) % ANCHOR == 0 {
            e = direct(g);
            r = ((2.0 * (g as f64 * h - c) * h - h * h) * inv).exp();
        } else {
            e *= r;
            r *= k;
        }
        if e < TINY {
            break;
        }
        out[g] += coef * e;
    }
}

/// Coordinate descent on the posterior mean of `h` from one start.
/// Returns the final unit-cube point and its h-mean.
fn coordinate_descent(model: &FittedTaag, start: Vec<f64>, cfg: &SearchConfig) -> (Vec<f64>, f64) {
    let p = model.params();
    let kp = &p.kernel;
    let eta = p.eta;
    let pts = model.data().unit_points();
    let q = model.q();
    let (n, d) = (pts.len(), kp.dims());
    let mut u = start;
    if n == 0 {
        return (u, p.mu);
    }
    let ea_of = |i: usize, k: usize, v: f64| (-((v - pts[i][k]) / kp.theta_a[k]).powi(2)).exp();
    let ez_of = |i: usize, k: usize, v: f64| (-((v - pts[i][k]) / kp.theta_z[k]).powi(2)).exp();
    let mut ea: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|k| ea_of(i, k, u[k])).collect()).collect();
    let mut ez: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|k| ez_of(i, k, u[k])).collect()).collect();
    let grid = crate::marginal::uniform_grid(0.0, 1.0, cfg.grid_size);
    let (wa, wz) = (1.0 - eta, eta);
    let mut acc = vec![0.0; cfg.grid_size];
    let mut value = model.mean_h_unit(&u);

    for _ in 0..cfg.sweeps {
        let mut moved = false;
        for l in 0..d {
            let mut base = p.mu;
            let mut current = p.mu;
            acc.iter_mut().for_each(|a| *a = 0.0);
            for i in 0..n {
                let a_rest: f64 = (0..d).filter(|&k| k != l).map(|k| kp.w[k] * ea[i][k]).sum();
                let z_rest: f64 = (0..d).filter(|&k| k != l).map(|k| ez[i][k]).product();
                let ca = q[i] * wa * kp.w[l];
                let cz = q[i] * wz * z_rest;
                if wa > 0.0 {
                    base += q[i] * wa * a_rest;
                    current += q[i] * wa * a_rest;
                    if ca != 0.0 {
                        add_gauss_row(&mut acc, pts[i][l], kp.theta_a[l], ca);
                        current += ca * ea[i][l];
                    }
                }
                if wz > 0.0 && cz != 0.0 {
                    add_gauss_row(&mut acc, pts[i][l], kp.theta_z[l], cz);
                    current += cz * ez[i][l];
                }
            }
            let g = argmin_index(&acc);
            let best = base + acc[g];
            if best < current - 1e-12 * (1.0 + current.abs()) && grid[g] != u[l] {
                u[l] = grid[g];
                for i in 0..n {
                    ea[i][l] = ea_of(i, l, u[l]);
                    ez[i][l] = ez_of(i, l, u[l]);
                }
                moved = true;
            }
        }
        value = model.mean_h_unit(&u);
        if !moved {
            break;
        }
    }
    (u, value)
}

/// Minimizes the plug-in surrogate over the domain. Since the Box-Cox link is
/// increasing, the posterior mean of `h` is minimized directly.
pub fn sbo_optimize(model: &FittedTaag, cfg: &SearchConfig, rng: RngState) -> Result<EstimatorResult> {
    let data = model.data();
    let d = data.dims();
    let mut r = rng.rng();
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(cfg.starts.max(1));
    if !data.is_empty() {
        starts.push(data.unit_points()[argmin_index(data.responses())].clone());
    }
    while starts.len() < cfg.starts.max(1) {
        starts.push((0..d).map(|_| r.random::<f64>()).collect());
    }
    let outcomes: Vec<(Vec<f64>, f64)> = starts
        .into_par_iter()
        .map(|s| coordinate_descent(model, s, cfg))
        .collect();
    let values: Vec<f64> = outcomes.iter().map(|o| o.1).collect();
    let best = &outcomes[argmin_index(&values)].0;
    let method = match model.variant() {
        ModelVariant::Taag => Method::SboTaag,
        ModelVariant::SqExp => Method::SboSqExp,
        ModelVariant::Tag => Method::SboTag,
    };
    Ok(EstimatorResult::plain(method, data.domain().unscale(best)))
}

/// Coordinate-wise minimizers of the marginal posterior means.
pub fn bomm(model: &FittedTaag, grid_size: usize) -> Result<EstimatorResult> {
    let profiles = marginal_posteriors(model, grid_size)?;
    Ok(bomm_from_profiles(&profiles))
}

pub fn bomm_from_profiles(profiles: &[MarginalPosterior]) -> EstimatorResult {
    EstimatorResult::plain(Method::Bomm, profiles.iter().map(|m| m.argmin_mean()).collect())
}

/// Coordinate-wise minimizers of the marginal lower-`alpha` tail means.
pub fn bomm_tail(model: &FittedTaag, alpha: f64, grid_size: usize) -> Result<EstimatorResult> {
    check_alpha(alpha)?;
    let profiles = marginal_posteriors(model, grid_size)?;
    bomm_tail_from_profiles(&profiles, alpha)
}

pub fn bomm_tail_from_profiles(profiles: &[MarginalPosterior], alpha: f64) -> Result<EstimatorResult> {
    check_alpha(alpha)?;
    let tp = TailParams::new(alpha)?;
    let mut r = EstimatorResult::plain(Method::BommTail, profiles.iter().map(|m| m.argmin_tail(&tp)).collect());
    r.alpha_star = Some(alpha);
    Ok(r)
}

/// `alpha` in the grid whose tail estimator has the smallest posterior mean
/// of `h`; ties go to the largest `alpha`. Returns `(alpha*, x_hat)`.
pub fn select_alpha(model: &FittedTaag, alpha_grid: &[f64], grid_size: usize) -> Result<(f64, Vec<f64>)> {
    check_alpha_grid(alpha_grid)?;
    let profiles = marginal_posteriors(model, grid_size)?;
    select_alpha_from_profiles(model, &profiles, alpha_grid)
}

pub fn select_alpha_from_profiles(
    model: &FittedTaag,
    profiles: &[MarginalPosterior],
    alpha_grid: &[f64],
) -> Result<(f64, Vec<f64>)> {
    check_alpha_grid(alpha_grid)?;
    let dom = model.data().domain();
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for &alpha in alpha_grid {
        let x = bomm_tail_from_profiles(profiles, alpha)?.x_hat;
        let v = model.mean_h_unit(&dom.scale_to_unit(&x)?);
        let better = match &best {
            None => true,
            Some((ba, bv, _)) => v < *bv || (v == *bv && alpha > *ba),
        };
        if better {
            best = Some((alpha, v, x));
        }
    }
    let (a, _, x) = best.expect("non-empty grid");
    Ok((a, x))
}

/// Unnormalized log posterior of `eta` with everything else held at the fit:
/// `-n/2 log s^2 + delta log eta + log(1 - eta) - 1/2 log det M(eta)`.
pub fn eta_log_density(model: &FittedTaag, eta: f64, delta: f64) -> Option<f64> {
    let (ra, rz) = model.grams();
    let n = ra.nrows();
    let gram = kernels::combine(ra, rz, eta, model.nugget());
    let chol = gram.cholesky()?;
    let r = DVector::from_iterator(n, model.latent().iter().map(|z| z - model.params().mu));
    let s2 = r.dot(&chol.solve(&r)) / n as f64;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let lp = -0.5 * n as f64 * s2.ln() + delta * eta.ln() + (1.0 - eta).ln() - 0.5 * logdet;
    lp.is_finite().then_some(lp)
}

/// Self-normalized importance-sampling estimate of `P(eta > T | data)` with
/// Uniform(0, 1) proposals.
pub fn eta_diagnostic(model: &FittedTaag, cfg: &DiagnosticConfig, rng: RngState) -> Result<f64> {
    if cfg.n_is < 100 {
        return Err(BommError::InvalidParameter(format!("n_is must be >= 100, got {}", cfg.n_is)));
    }
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(BommError::InvalidParameter(format!("threshold must be in [0, 1], got {}", cfg.threshold)));
    }
    let delta = model.params().delta();
    if !delta.is_finite() {
        return Err(BommError::Diagnostic("delta is infinite (eta = 1); diagnostic undefined".into()));
    }
    if model.data().is_empty() {
        return Err(BommError::Diagnostic("no data".into()));
    }
    let mut r = rng.rng();
    let etas: Vec<f64> = (0..cfg.n_is)
        .map(|_| loop {
            let e = r.random::<f64>();
            if e > 0.0 {
                break e;
            }
        })
        .collect();
    let logw: Vec<f64> = etas
        .par_iter()
        .map(|&e| eta_log_density(model, e, delta).unwrap_or(f64::NEG_INFINITY))
        .collect();
    xi_from_weights(&etas, &logw, cfg.threshold)
}

/// `sum w 1{eta > T} / sum w` from log-weights.
pub fn xi_from_weights(etas: &[f64], logw: &[f64], threshold: f64) -> Result<f64> {
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(BommError::Diagnostic("all importance weights are zero or undefined".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (&e, &lw) in etas.iter().zip(logw) {
        let w = (lw - m).exp();
        den += w;
        if e > threshold {
            num += w;
        }
    }
    if !(den > 0.0) {
        return Err(BommError::Diagnostic("importance weights sum to zero".into()));
    }
    Ok((num / den).clamp(0.0, 1.0))
}

/// Tail branch exactly when `xi > 1 - rho`.
pub fn choose_branch(xi: f64, rho: f64) -> Branch {
    if xi <= 1.0 - rho {
        Branch::Bomm
    } else {
        Branch::Tail
    }
}

/// Fits the full model and runs the diagnostic-driven estimator.
pub fn bomm_plus(data: &Dataset, cfg: &DiagnosticConfig, fit_cfg: &FitConfig, rng: RngState) -> Result<EstimatorResult> {
    let mut fc = fit_cfg.clone();
    fc.variant = ModelVariant::Taag;
    let model = fit(data, &fc, rng.derive_str("fit"))?;
    bomm_plus_with_model(&model, cfg, rng.derive_str("diagnostic"))
}

/// The diagnostic-driven estimator on an already fitted model. A failed
/// diagnostic falls back to the marginal-mean branch.
pub fn bomm_plus_with_model(model: &FittedTaag, cfg: &DiagnosticConfig, rng: RngState) -> Result<EstimatorResult> {
    cfg.validate()?;
    let profiles = marginal_posteriors(model, cfg.grid_size)?;
    let xi = match eta_diagnostic(model, cfg, rng) {
        Ok(xi) => xi,
        Err(e) => {
            warn!("non-additivity diagnostic failed ({e}); using the marginal-mean branch");
            0.0
        }
    };
    let branch = choose_branch(xi, cfg.rho);
    debug!("xi = {xi:.4}, branch = {branch:?}");
    let mut r = match branch {
        Branch::Bomm => bomm_from_profiles(&profiles),
        Branch::Tail => {
            let (alpha, x) = select_alpha_from_profiles(model, &profiles, &cfg.alpha_grid)?;
            let mut r = EstimatorResult::plain(Method::BommPlus, x);
            r.alpha_star = Some(alpha);
            r
        }
    };
    r.method = Method::BommPlus;
    r.xi = Some(xi);
    r.branch = Some(branch);
    Ok(r)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchConfig {
    pub n_ini: usize,
    pub b: usize,
    pub budget: usize,
    pub maximin_iters: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchStep {
    pub iteration: usize,
    pub estimate: EstimatorResult,
    /// Evaluations spent after this iteration's batch.
    pub evaluations: usize,
    pub best_value: f64,
}

#[derive(Debug, Clone)]
pub struct BatchTrajectory {
    pub steps: Vec<BatchStep>,
    pub data: Dataset,
    pub evaluations: usize,
    /// Set when an evaluation failed and the loop stopped early.
    pub aborted: Option<String>,
}

/// Batch-sequential loop: a maximin LHD of `n_ini` points, then batches of
/// one diagnostic-driven estimate plus `b - 1` random-LHD exploration points
/// until the budget is spent.
pub fn batch_bomm_plus(
    objective: &dyn Objective,
    batch: &BatchConfig,
    cfg: &DiagnosticConfig,
    fit_cfg: &FitConfig,
    rng: RngState,
) -> Result<BatchTrajectory> {
    if batch.b == 0 {
        return Err(BommError::InvalidParameter("batch size must be >= 1".into()));
    }
    if batch.n_ini + batch.b > batch.budget {
        return Err(BommError::InvalidParameter(format!(
            "n_ini + b = {} exceeds the budget {}",
            batch.n_ini + batch.b,
            batch.budget
        )));
    }
    let dom = objective.domain();
    let d = dom.dims();
    let mut lhd = LhdConfig::new(batch.n_ini, d);
    if let Some(it) = batch.maximin_iters {
        lhd.maximin_iters = it;
    }
    let design = maximin_lhd(&lhd, &mut rng.derive_str("initial").rng())?.unscaled(&dom)?;
    let mut y = Vec::with_capacity(design.len());
    for x in design.rows() {
        y.push(objective.evaluate(x)?);
    }
    let mut data = Dataset::new(dom.clone(), design, y)?;
    let mut evaluations = data.len();
    let mut steps = Vec::new();
    let mut aborted = None;
    let mut iteration = 0;
    while evaluations < batch.budget {
        iteration += 1;
        let it_rng = rng.derive(iteration as u64);
        let est = bomm_plus(&data, cfg, fit_cfg, it_rng.derive_str("bomm-plus"))?;
        let count = batch.b.min(batch.budget - evaluations);
        let mut xr = it_rng.derive_str("explore").rng();
        let mut points = vec![est.x_hat.clone()];
        if data.design().rows().iter().any(|r| r == &est.x_hat) {
            info!("estimate already evaluated; replacing it with a random point");
            points[0] = dom.unscale(&(0..d).map(|_| xr.random::<f64>()).collect::<Vec<_>>());
        }
        let explore = augment_batch(data.design(), count - 1, &mut xr).unscaled(&dom)?;
        points.extend(explore.into_rows());
        let mut values = Vec::with_capacity(points.len());
        for x in &points {
            match objective.evaluate(x) {
                Ok(v) => values.push(v),
                Err(e) => {
                    aborted = Some(e.to_string());
                    break;
                }
            }
        }
        points.truncate(values.len());
        evaluations += values.len();
        data = data.extended(&points, &values)?;
        let mut est = est;
        est.f_at_x_hat = values.first().copied().filter(|_| points[0] == est.x_hat);
        steps.push(BatchStep {
            iteration,
            estimate: est,
            evaluations,
            best_value: data.responses().iter().copied().fold(f64::INFINITY, f64::min),
        });
        if aborted.is_some() {
            break;
        }
    }
    Ok(BatchTrajectory {
        steps,
        data,
        evaluations,
        aborted,
    })
}
