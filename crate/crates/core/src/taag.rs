//! Transformed approximate additive GP: `f = phi_lambda(A + Z)` with an
//! additive GP `A` (weight `1 - eta`) and a product-kernel GP `Z` (weight
//! `eta`), fitted by empirical Bayes on the Box-Cox latent scale.
//!
//! `mu` and `sigma^2` are profiled out in closed form (GLS), so the search
//! runs over `(lambda, eta, w, theta_A, theta_Z)` only. The Box-Cox Jacobian
//! is part of the likelihood so that different `lambda` are comparable.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RngState};
use crate::error::{BommError, Result};
use crate::kernels::{self, KernelParams, PairwiseSq, BASE_NUGGET, THETA_RANGE};
use crate::optim::nelder_mead;
use crate::transform::{BoxCox, LAMBDA_RANGE};

/// Upper bound on the product-kernel length-scales when `eta` is free.
/// Above roughly twice the unit-cube width the product kernel is nearly
/// additive over the domain and `eta` stops being identifiable.
pub const THETA_Z_MIXTURE_MAX: f64 = 2.0;

/// Which members of the model family are free during fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    /// Everything free.
    Taag,
    /// Plain anisotropic squared-exponential GP: `eta = 1`, `lambda = 1`.
    SqExp,
    /// Transformed additive GP: `eta = 0`.
    Tag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaagParams {
    pub lambda: f64,
    pub mu: f64,
    pub sigma2: f64,
    pub eta: f64,
    pub kernel: KernelParams,
}

impl TaagParams {
    pub fn new(lambda: f64, mu: f64, sigma2: f64, eta: f64, kernel: KernelParams) -> Result<Self> {
        let p = TaagParams {
            lambda,
            mu,
            sigma2,
            eta,
            kernel,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds from `tau^2 = sigma^2 (1 - eta)` and `delta = eta / (1 - eta)`.
    pub fn from_reparam(lambda: f64, mu: f64, tau2: f64, delta: f64, kernel: KernelParams) -> Result<Self> {
        if !(delta >= 0.0) {
            return Err(BommError::InvalidParameter(format!("delta must be >= 0, got {delta}")));
        }
        TaagParams::new(lambda, mu, tau2 * (1.0 + delta), delta / (1.0 + delta), kernel)
    }

    /// `eta = 1` is admitted for the pure product-kernel baseline.
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(BommError::InvalidParameter(format!("sigma2 must be > 0, got {}", self.sigma2)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(BommError::InvalidParameter(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        if !self.lambda.is_finite() || !self.mu.is_finite() {
            return Err(BommError::InvalidParameter("lambda and mu must be finite".into()));
        }
        self.kernel.validate()
    }

    pub fn tau2(&self) -> f64 {
        self.sigma2 * (1.0 - self.eta)
    }

    /// `+inf` at `eta = 1`.
    pub fn delta(&self) -> f64 {
        if self.eta >= 1.0 {
            f64::INFINITY
        } else {
            self.eta / (1.0 - self.eta)
        }
    }

    pub fn boxcox(&self) -> BoxCox {
        BoxCox::new(self.lambda)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub variant: ModelVariant,
    pub starts: usize,
    /// Block-coordinate cycles for the best starts; other starts get one.
    pub cycles: usize,
    pub refine_top: usize,
    /// Nelder-Mead budget per block is `evals_per_param * (block size + 1)`.
    pub evals_per_param: usize,
    pub base_nugget: f64,
    pub lambda_inits: Vec<f64>,
    pub blocks: BlockScheme,
    /// Holds `eta` at this value for the full model.
    pub fixed_eta: Option<f64>,
    /// Search bounds for the additive length-scales (unit-cube units).
    pub theta_a_range: (f64, f64),
    /// Search bounds for the product length-scales (unit-cube units).
    pub theta_z_range: (f64, f64),
}

impl FitConfig {
    pub fn new(variant: ModelVariant) -> Self {
        FitConfig {
            variant,
            starts: 10,
            cycles: 6,
            refine_top: 3,
            evals_per_param: 20,
            base_nugget: BASE_NUGGET,
            lambda_inits: vec![-1.0, 0.0, 0.5, 1.0],
            blocks: BlockScheme::PerDimension,
            fixed_eta: None,
            theta_a_range: THETA_RANGE,
            theta_z_range: match variant {
                ModelVariant::Taag => (THETA_RANGE.0, THETA_Z_MIXTURE_MAX),
                _ => THETA_RANGE,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.fixed_eta {
            if !(0.0..=1.0).contains(&e) {
                return Err(BommError::InvalidParameter(format!("fixed eta must be in [0, 1], got {e}")));
            }
        }
        for (name, (lo, hi)) in [("theta_a_range", self.theta_a_range), ("theta_z_range", self.theta_z_range)] {
            if !(lo > 0.0 && lo < hi && hi.is_finite()) {
                return Err(BommError::InvalidParameter(format!("{name} must satisfy 0 < lo < hi, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig::new(ModelVariant::Taag)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub starts: usize,
    pub failed_starts: usize,
    pub evaluations: usize,
    /// Final profiled log-likelihood of every start, in start order.
    pub start_values: Vec<f64>,
}

/// Profiled likelihood at fixed `(lambda, eta, kernel)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Profiled {
    pub log_lik: f64,
    pub mu: f64,
    pub sigma2: f64,
    pub nugget: f64,
}

/// A fitted surrogate. Immutable apart from a clamp counter.
#[derive(Debug)]
pub struct FittedTaag {
    params: TaagParams,
    variant: ModelVariant,
    data: Dataset,
    latent: Vec<f64>,
    ra: DMatrix<f64>,
    rz: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    nugget: f64,
    q: DVector<f64>,
    log_marginal: f64,
    diagnostics: FitDiagnostics,
    clamps: AtomicUsize,
}

impl Clone for FittedTaag {
    fn clone(&self) -> Self {
        FittedTaag {
            params: self.params.clone(),
            variant: self.variant,
            data: self.data.clone(),
            latent: self.latent.clone(),
            ra: self.ra.clone(),
            rz: self.rz.clone(),
            chol: self.chol.clone(),
            nugget: self.nugget,
            q: self.q.clone(),
            log_marginal: self.log_marginal,
            diagnostics: self.diagnostics.clone(),
            clamps: AtomicUsize::new(self.clamps.load(Ordering::Relaxed)),
        }
    }
}

/// Serializable summary of a fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDump {
    pub variant: ModelVariant,
    pub params: TaagParams,
    pub tau2: f64,
    pub delta: f64,
    pub log_marginal: f64,
    pub nugget: f64,
    pub shift: f64,
    pub n: usize,
    pub d: usize,
    pub diagnostics: FitDiagnostics,
}

/// Latent values `phi_lambda^{-1}(f + shift)`.
pub fn latent_values(data: &Dataset, lambda: f64) -> Vec<f64> {
    let bc = BoxCox::new(lambda);
    data.shifted_responses()
        .iter()
        .map(|&z| bc.inverse_unchecked(z))
        .collect()
}

/// Gaussian log density of the latent values under
/// `N(mu 1, sigma^2 M)` plus the Box-Cox log-Jacobian, where `M` is the
/// nuggeted mixture Gram (nugget escalated from `base_nugget` if needed).
pub fn log_marginal_likelihood(params: &TaagParams, data: &Dataset, base_nugget: f64) -> Result<f64> {
    params.validate()?;
    let n = data.len();
    if n == 0 {
        return Ok(0.0);
    }
    let gram = kernels::gram_mixture(data.unit_points(), params.eta, &params.kernel, 0.0);
    let (chol, _) = kernels::factorize(&gram, base_nugget)?;
    let z = DVector::from_vec(latent_values(data, params.lambda));
    let r = z.add_scalar(-params.mu);
    let quad = r.dot(&chol.solve(&r));
    let logdet = log_det(&chol);
    let nf = n as f64;
    Ok(-0.5 * nf * (2.0 * PI * params.sigma2).ln() - 0.5 * logdet - 0.5 * quad / params.sigma2
        + params.boxcox().log_jacobian(data.shifted_responses()))
}

/// Likelihood with `mu` and `sigma^2` replaced by their GLS estimates.
pub fn profiled_log_likelihood(
    lambda: f64,
    eta: f64,
    kernel: &KernelParams,
    data: &Dataset,
    base_nugget: f64,
) -> Result<Profiled> {
    let mut ev = Evaluator::new(data, base_nugget);
    ev.eval(lambda, eta, kernel)
        .ok_or_else(|| BommError::Fit("profiled likelihood is undefined at these parameters".into()))
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

struct Factor {
    key: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    nugget: f64,
    logdet: f64,
    ones: DVector<f64>,
    ones_sum: f64,
}

/// Caches the factorization so `lambda`-only moves cost two solves.
struct Evaluator<'a> {
    pairs: PairwiseSq,
    y: &'a [f64],
    base_nugget: f64,
    cache: Option<Factor>,
    evals: usize,
}

impl<'a> Evaluator<'a> {
    fn new(data: &'a Dataset, base_nugget: f64) -> Self {
        Evaluator {
            pairs: PairwiseSq::new(data.unit_points()),
            y: data.shifted_responses(),
            base_nugget,
            cache: None,
            evals: 0,
        }
    }

    fn factor(&mut self, eta: f64, kp: &KernelParams) -> Option<&Factor> {
        let mut key = Vec::with_capacity(1 + 3 * kp.dims());
        key.push(eta);
        key.extend_from_slice(&kp.w);
        key.extend_from_slice(&kp.theta_a);
        key.extend_from_slice(&kp.theta_z);
        if self.cache.as_ref().is_none_or(|f| f.key != key) {
            self.cache = None;
            let gram = self.pairs.mixture(eta, kp);
            let (chol, nugget) = kernels::factorize(&gram, self.base_nugget).ok()?;
            let n = self.pairs.n();
            let ones = chol.solve(&DVector::from_element(n, 1.0));
            let ones_sum = ones.sum();
            let logdet = log_det(&chol);
            self.cache = Some(Factor {
                key,
                chol,
                nugget,
                logdet,
                ones,
                ones_sum,
            });
        }
        self.cache.as_ref()
    }

    fn eval(&mut self, lambda: f64, eta: f64, kp: &KernelParams) -> Option<Profiled> {
        self.evals += 1;
        let y = self.y;
        let n = y.len();
        if n < 2 {
            return None;
        }
        let f = self.factor(eta, kp)?;
        let bc = BoxCox::new(lambda);
        let z = DVector::from_iterator(n, y.iter().map(|&v| bc.inverse_unchecked(v)));
        let mu = z.dot(&f.ones) / f.ones_sum;
        let r = z.add_scalar(-mu);
        let quad = r.dot(&f.chol.solve(&r));
        let sigma2 = quad / n as f64;
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return None;
        }
        let nf = n as f64;
        let log_lik =
            -0.5 * nf * ((2.0 * PI * sigma2).ln() + 1.0) - 0.5 * f.logdet + bc.log_jacobian(y);
        log_lik.is_finite().then_some(Profiled {
            log_lik,
            mu,
            sigma2,
            nugget: f.nugget,
        })
    }
}

/// Upper end of the fitted `eta`, keeping `delta` finite.
const ETA_MAX: f64 = 1.0 - 1e-9;

/// Unconstrained coordinates: `[lambda, eta, w (d), theta_A (d), theta_Z (d)]`.
#[derive(Debug, Clone, Copy)]
struct Layout {
    d: usize,
    variant: ModelVariant,
    fixed_eta: Option<f64>,
    theta_a_range: (f64, f64),
    theta_z_range: (f64, f64),
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Layout {
    fn len(&self) -> usize {
        2 + 3 * self.d
    }

    fn lambda_of(&self, u: f64) -> f64 {
        match self.variant {
            ModelVariant::SqExp => 1.0,
            _ => LAMBDA_RANGE.1 * u.tanh(),
        }
    }

    fn eta_of(&self, u: f64) -> f64 {
        match self.variant {
            ModelVariant::SqExp => 1.0,
            ModelVariant::Tag => 0.0,
            ModelVariant::Taag => self.fixed_eta.unwrap_or_else(|| logistic(u).min(ETA_MAX)),
        }
    }

    fn theta_of(range: (f64, f64), u: f64) -> f64 {
        let (lo, hi) = (range.0.ln(), range.1.ln());
        (lo + (hi - lo) * logistic(u)).exp()
    }

    fn theta_to_u(range: (f64, f64), theta: f64) -> f64 {
        let (lo, hi) = (range.0.ln(), range.1.ln());
        let p = ((theta.ln() - lo) / (hi - lo)).clamp(1e-6, 1.0 - 1e-6);
        logit(p)
    }

    fn decode(&self, u: &[f64]) -> (f64, f64, KernelParams) {
        let d = self.d;
        let lambda = self.lambda_of(u[0]);
        let eta = self.eta_of(u[1]);
        let uw = &u[2..2 + d];
        let m = uw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = uw.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = ex.iter().sum();
        let mut w: Vec<f64> = ex.iter().map(|e| e / s).collect();
        // Renormalize so the weights sum to 1 within rounding.
        let s2: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s2);
        let theta_a = u[2 + d..2 + 2 * d].iter().map(|&v| Self::theta_of(self.theta_a_range, v)).collect();
        let theta_z = u[2 + 2 * d..2 + 3 * d].iter().map(|&v| Self::theta_of(self.theta_z_range, v)).collect();
        (lambda, eta, KernelParams { w, theta_a, theta_z })
    }

    fn encode(&self, lambda: f64, eta: f64, kp: &KernelParams) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.len());
        u.push((lambda / LAMBDA_RANGE.1).clamp(-0.999, 0.999).atanh());
        u.push(logit(eta.clamp(1e-4, 1.0 - 1e-4)));
        u.extend(kp.w.iter().map(|w| w.max(1e-12).ln()));
        u.extend(kp.theta_a.iter().map(|&t| Self::theta_to_u(self.theta_a_range, t)));
        u.extend(kp.theta_z.iter().map(|&t| Self::theta_to_u(self.theta_z_range, t)));
        u
    }

    /// Index blocks optimized in turn; parameters fixed by the variant are omitted.
    fn blocks(&self, scheme: BlockScheme) -> Vec<Vec<usize>> {
        let d = self.d;
        let (free_lambda, free_eta, use_a, use_z) = match self.variant {
            ModelVariant::SqExp => (false, false, false, true),
            ModelVariant::Tag => (true, false, true, false),
            ModelVariant::Taag => (true, true, true, true),
        };
        let mut out = Vec::new();
        if free_lambda {
            out.push(vec![0]);
        }
        if free_eta && self.fixed_eta.is_none() {
            out.push(vec![1]);
        }
        let w = |l: usize| 2 + l;
        let ta = |l: usize| 2 + d + l;
        let tz = |l: usize| 2 + 2 * d + l;
        match scheme {
            BlockScheme::Grouped => {
                if use_a && d > 1 {
                    out.push((0..d).map(w).collect());
                }
                if use_a {
                    out.push((0..d).map(ta).collect());
                }
                if use_z {
                    out.push((0..d).map(tz).collect());
                }
            }
            BlockScheme::PerDimension => {
                for l in 0..d {
                    let mut b = Vec::new();
                    if use_a && d > 1 {
                        b.push(w(l));
                    }
                    if use_a {
                        b.push(ta(l));
                    }
                    if use_z {
                        b.push(tz(l));
                    }
                    out.push(b);
                }
            }
        }
        out
    }
}

/// How the kernel parameters are split into Nelder-Mead blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockScheme {
    /// One block each for `w`, `theta_A` and `theta_Z`.
    Grouped,
    /// One block per input dimension holding `(w_l, theta_A,l, theta_Z,l)`.
    PerDimension,
}

struct StartOutcome {
    u: Vec<f64>,
    value: f64,
    evals: usize,
}

fn run_cycles(data: &Dataset, cfg: &FitConfig, layout: Layout, mut u: Vec<f64>, cycles: usize) -> StartOutcome {
    let mut ev = Evaluator::new(data, cfg.base_nugget);
    let blocks = layout.blocks(cfg.blocks);
    let mut value = f64::INFINITY;
    for _ in 0..cycles {
        let before = value;
        for block in &blocks {
            let x0: Vec<f64> = block.iter().map(|&i| u[i]).collect();
            let budget = cfg.evals_per_param * (block.len() + 1);
            let base = u.clone();
            let res = nelder_mead(
                |x: &[f64]| {
                    let mut full = base.clone();
                    for (k, &i) in block.iter().enumerate() {
                        full[i] = x[k];
                    }
                    let (lam, eta, kp) = layout.decode(&full);
                    ev.eval(lam, eta, &kp).map_or(f64::INFINITY, |p| -p.log_lik)
                },
                &x0,
                0.7,
                budget,
                1e-9,
            );
            if res.value <= value || !value.is_finite() {
                for (k, &i) in block.iter().enumerate() {
                    u[i] = res.x[k];
                }
                value = res.value.min(value);
            }
        }
        if value.is_finite() && (before - value).abs() <= 1e-7 * (1.0 + value.abs()) {
            break;
        }
    }
    StartOutcome {
        u,
        value,
        evals: ev.evals,
    }
}

/// Empirical-Bayes fit: block-coordinate Nelder-Mead from `cfg.starts`
/// random starts (one cycle each), continued for the `cfg.refine_top` best.
pub fn fit(data: &Dataset, cfg: &FitConfig, rng: RngState) -> Result<FittedTaag> {
    let n = data.len();
    let d = data.dims();
    if n < 2 {
        return Err(BommError::Fit(format!("need at least 2 observations, got {n}")));
    }
    cfg.validate()?;
    let y = data.responses();
    if y.iter().all(|&v| v == y[0]) {
        return Err(BommError::Fit("responses are constant; the likelihood is unbounded".into()));
    }
    if n < d + 2 {
        warn!("fitting {d}-dimensional model on only {n} points");
    }
    let layout = Layout {
        d,
        variant: cfg.variant,
        fixed_eta: cfg.fixed_eta,
        theta_a_range: cfg.theta_a_range,
        theta_z_range: cfg.theta_z_range,
    };
    let starts = cfg.starts.max(1);
    let mut r = rng.rng();
    let inits: Vec<Vec<f64>> = (0..starts)
        .map(|k| {
            let lambda = match cfg.variant {
                ModelVariant::SqExp => 1.0,
                _ if cfg.lambda_inits.is_empty() => 1.0,
                _ => cfg.lambda_inits[k % cfg.lambda_inits.len()],
            };
            let eta = r.random_range(0.05..0.7);
            let w: Vec<f64> = (0..d).map(|_| r.random_range(0.5..1.5)).collect();
            let ws: f64 = w.iter().sum();
            // Log-uniform draw from [lo, hi] intersected with the search range.
            let log_unif = |r: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64, range: (f64, f64)| {
                let (a, b) = (lo.max(range.0).min(range.1).ln(), hi.min(range.1).max(range.0).ln());
                (a + r.random::<f64>() * (b - a)).exp()
            };
            let theta_a = (0..d).map(|_| log_unif(&mut r, 0.15, 1.5, cfg.theta_a_range)).collect();
            let scale = (d as f64).sqrt();
            let theta_z = (0..d)
                .map(|_| log_unif(&mut r, 0.3 * scale, 1.5 * scale, cfg.theta_z_range))
                .collect();
            let kp = KernelParams {
                w: w.iter().map(|v| v / ws).collect(),
                theta_a,
                theta_z,
            };
            layout.encode(lambda, eta, &kp)
        })
        .collect();

    let first: Vec<StartOutcome> = inits
        .into_par_iter()
        .map(|u| run_cycles(data, cfg, layout, u, 1))
        .collect();
    let mut evaluations: usize = first.iter().map(|s| s.evals).sum();
    let mut order: Vec<usize> = (0..first.len()).collect();
    order.sort_by(|&a, &b| first[a].value.total_cmp(&first[b].value));

    let top: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| first[i].value.is_finite())
        .take(cfg.refine_top.max(1))
        .collect();
    let refined: Vec<(usize, StartOutcome)> = top
        .par_iter()
        .map(|&i| {
            let out = if cfg.cycles > 1 {
                run_cycles(data, cfg, layout, first[i].u.clone(), cfg.cycles - 1)
            } else {
                StartOutcome {
                    u: first[i].u.clone(),
                    value: first[i].value,
                    evals: 0,
                }
            };
            (i, out)
        })
        .collect();
    evaluations += refined.iter().map(|(_, s)| s.evals).sum::<usize>();

    let mut start_values: Vec<f64> = first.iter().map(|s| -s.value).collect();
    for (i, s) in &refined {
        if s.value <= first[*i].value {
            start_values[*i] = -s.value;
        }
    }
    let failed_starts = first.iter().filter(|s| !s.value.is_finite()).count();
    let best = refined
        .iter()
        .map(|(i, s)| if s.value <= first[*i].value { &s.u } else { &first[*i].u })
        .zip(refined.iter().map(|(i, s)| s.value.min(first[*i].value)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    let Some((u, value)) = best else {
        return Err(BommError::Fit(format!(
            "all {starts} starts failed (non-finite likelihood); responses may be constant"
        )));
    };
    if !value.is_finite() {
        return Err(BommError::Fit("no start reached a finite likelihood".into()));
    }
    let (lambda, eta, kernel) = layout.decode(u);
    let prof = profiled_log_likelihood(lambda, eta, &kernel, data, cfg.base_nugget)?;
    let params = TaagParams::new(lambda, prof.mu, prof.sigma2, eta, kernel)?;
    let diagnostics = FitDiagnostics {
        starts,
        failed_starts,
        evaluations,
        start_values,
    };
    FittedTaag::condition_with(data.clone(), params, cfg.variant, cfg.base_nugget, diagnostics)
}

impl FittedTaag {
    /// Conditions the model on `data` at fixed parameters.
    pub fn condition(data: Dataset, params: TaagParams, variant: ModelVariant, base_nugget: f64) -> Result<Self> {
        FittedTaag::condition_with(data, params, variant, base_nugget, FitDiagnostics::default())
    }

    fn condition_with(
        data: Dataset,
        params: TaagParams,
        variant: ModelVariant,
        base_nugget: f64,
        diagnostics: FitDiagnostics,
    ) -> Result<Self> {
        params.validate()?;
        if params.kernel.dims() != data.dims() {
            return Err(BommError::InvalidParameter(format!(
                "kernel has {} dimensions, data has {}",
                params.kernel.dims(),
                data.dims()
            )));
        }
        let (ra, rz) = kernels::gram_parts(data.unit_points(), &params.kernel);
        let gram = kernels::combine(&ra, &rz, params.eta, 0.0);
        let (chol, nugget) = kernels::factorize(&gram, base_nugget)?;
        let latent = latent_values(&data, params.lambda);
        let resid = DVector::from_iterator(latent.len(), latent.iter().map(|z| z - params.mu));
        let q = chol.solve(&resid);
        let log_marginal = if data.is_empty() {
            0.0
        } else {
            let quad = resid.dot(&q);
            let nf = data.len() as f64;
            -0.5 * nf * (2.0 * PI * params.sigma2).ln() - 0.5 * log_det(&chol) - 0.5 * quad / params.sigma2
                + params.boxcox().log_jacobian(data.shifted_responses())
        };
        Ok(FittedTaag {
            params,
            variant,
            data,
            latent,
            ra,
            rz,
            chol,
            nugget,
            q,
            log_marginal,
            diagnostics,
            clamps: AtomicUsize::new(0),
        })
    }

    pub fn params(&self) -> &TaagParams {
        &self.params
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn latent(&self) -> &[f64] {
        &self.latent
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    pub fn diagnostics(&self) -> &FitDiagnostics {
        &self.diagnostics
    }

    /// Additive and product Grams without nugget.
    pub fn grams(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.ra, &self.rz)
    }

    /// `M^{-1} v` for the nuggeted mixture Gram `M`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    pub(crate) fn chol(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    /// Number of posterior variances clamped at zero so far.
    pub fn variance_clamps(&self) -> usize {
        self.clamps.load(Ordering::Relaxed)
    }

    pub(crate) fn count_clamp(&self) {
        self.clamps.fetch_add(1, Ordering::Relaxed);
    }

    fn mixed_cross(&self, u: &[f64]) -> DVector<f64> {
        let (a, z) = kernels::cross_vectors(self.data.unit_points(), u, &self.params.kernel);
        let eta = self.params.eta;
        DVector::from_iterator(a.len(), a.iter().zip(&z).map(|(a, z)| kernels::mix(eta, *a, *z)))
    }

    /// Posterior mean of the latent `h` at a unit-cube point.
    pub fn mean_h_unit(&self, u: &[f64]) -> f64 {
        self.params.mu + self.mixed_cross(u).dot(&self.q)
    }

    /// Posterior mean and variance of `h` at a unit-cube point.
    pub fn posterior_h_unit(&self, u: &[f64]) -> (f64, f64) {
        let r = self.mixed_cross(u);
        let mean = self.params.mu + r.dot(&self.q);
        let mut v = r.clone();
        self.chol.solve_mut(&mut v);
        let var = self.params.sigma2 * (1.0 - r.dot(&v));
        if var < 0.0 {
            self.count_clamp();
            (mean, 0.0)
        } else {
            (mean, var)
        }
    }

    /// Posterior mean and variance of `h = phi_lambda^{-1}(f + shift)` at `x`
    /// (original units).
    pub fn posterior_h(&self, x: &[f64]) -> Result<(f64, f64)> {
        let u = self.data.domain().scale_to_unit(x)?;
        Ok(self.posterior_h_unit(&u))
    }

    /// Posterior covariance of `h` between two points (original units).
    pub fn posterior_cov_h(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let dom = self.data.domain();
        let (ux, uy) = (dom.scale_to_unit(x)?, dom.scale_to_unit(y)?);
        let (rx, ry) = (self.mixed_cross(&ux), self.mixed_cross(&uy));
        let prior = kernels::r_mixture(&ux, &uy, self.params.eta, &self.params.kernel);
        Ok(self.params.sigma2 * (prior - rx.dot(&self.chol.solve(&ry))))
    }

    /// Plug-in surrogate `phi_lambda(E[h | data]) - shift` in original units.
    /// A latent mean outside the link's range is clamped to the boundary.
    pub fn posterior_f_mean(&self, x: &[f64]) -> Result<f64> {
        let (m, _) = self.posterior_h(x)?;
        Ok(self.f_from_h(m))
    }

    pub fn f_from_h(&self, h: f64) -> f64 {
        let bc = self.params.boxcox();
        match bc.forward(h) {
            Ok(v) => v - self.data.shift(),
            Err(_) => {
                warn!("latent mean {h} outside the Box-Cox range for lambda={}; clamping", self.params.lambda);
                if self.params.lambda > 0.0 {
                    -self.data.shift()
                } else {
                    f64::MAX
                }
            }
        }
    }

    pub fn dump(&self) -> ModelDump {
        ModelDump {
            variant: self.variant,
            params: self.params.clone(),
            tau2: self.params.tau2(),
            delta: self.params.delta(),
            log_marginal: self.log_marginal,
            nugget: self.nugget,
            shift: self.data.shift(),
            n: self.data.len(),
            d: self.data.dims(),
            diagnostics: self.diagnostics.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DesignMatrix, Domain};
    use crate::design::random_lhd;

    fn toy_data(n: usize, d: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> Dataset {
        let mut rng = RngState::new(seed).rng();
        let dom = Domain::unit(d);
        let design = random_lhd(n, d, false, &mut rng);
        let y = design.rows().iter().map(|x| f(x)).collect();
        Dataset::new(dom, design, y).unwrap()
    }

    #[test]
    fn reparametrization_consistent() {
        let kp = KernelParams::isotropic(2, 0.5);
        let p = TaagParams::new(0.5, 1.0, 2.0, 0.25, kp.clone()).unwrap();
        assert!((p.tau2() - 1.5).abs() < 1e-12);
        assert!((p.delta() - 1.0 / 3.0).abs() < 1e-12);
        let back = TaagParams::from_reparam(0.5, 1.0, p.tau2(), p.delta(), kp).unwrap();
        assert!((back.sigma2 - 2.0).abs() < 1e-10 && (back.eta - 0.25).abs() < 1e-10);
        assert!(TaagParams::new(0.0, 0.0, -1.0, 0.5, KernelParams::isotropic(1, 1.0)).is_err());
        assert!(TaagParams::new(0.0, 0.0, 1.0, 1.5, KernelParams::isotropic(1, 1.0)).is_err());
    }

    #[test]
    fn single_observation_likelihood() {
        let dom = Domain::unit(1);
        let data = Dataset::new(dom, DesignMatrix::new(1, vec![vec![0.3]]).unwrap(), vec![2.0]).unwrap();
        let p = TaagParams::new(0.0, 0.1, 1.5, 0.2, KernelParams::isotropic(1, 0.4)).unwrap();
        let ll = log_marginal_likelihood(&p, &data, BASE_NUGGET).unwrap();
        let var = 1.5 * (1.0 + BASE_NUGGET);
        let z = 2.0f64.ln();
        let expected = -0.5 * (2.0 * PI * var).ln() - 0.5 * (z - 0.1).powi(2) / var - 2.0f64.ln();
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn layout_round_trip() {
        let layout = Layout {
            d: 3,
            variant: ModelVariant::Taag,
            fixed_eta: None,
            theta_a_range: THETA_RANGE,
            theta_z_range: THETA_RANGE,
        };
        let kp = KernelParams::new(vec![0.2, 0.3, 0.5], vec![0.1, 1.0, 5.0], vec![0.5, 2.0, 0.05]).unwrap();
        let (lam, eta, back) = layout.decode(&layout.encode(0.7, 0.3, &kp));
        assert!((lam - 0.7).abs() < 1e-12 && (eta - 0.3).abs() < 1e-12);
        for (a, b) in back.theta_a.iter().zip(&kp.theta_a) {
            assert!((a - b).abs() < 1e-9 * b);
        }
        for (a, b) in back.w.iter().zip(&kp.w) {
            assert!((a - b).abs() < 1e-12);
        }
        back.validate().unwrap();
    }

    #[test]
    fn fit_is_deterministic_and_interpolates() {
        let data = toy_data(20, 2, 5, |x| (x[0] - 0.3).powi(2) + (x[1] - 0.6).powi(2) + 0.5);
        let cfg = FitConfig {
            starts: 4,
            ..FitConfig::default()
        };
        let a = fit(&data, &cfg, RngState::new(1)).unwrap();
        let b = fit(&data, &cfg, RngState::new(1)).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.log_marginal(), b.log_marginal());
        for (x, z) in data.design().rows().iter().zip(a.latent()) {
            let (m, v) = a.posterior_h(x).unwrap();
            assert!((m - z).abs() < 1e-3, "{m} vs {z}");
            assert!(v <= a.params().sigma2 * 1e-3);
            let f = a.posterior_f_mean(x).unwrap();
            let truth = (x[0] - 0.3).powi(2) + (x[1] - 0.6).powi(2) + 0.5;
            assert!((f - truth).abs() < 1e-3);
        }
    }

    #[test]
    fn fixed_variants_respect_constraints() {
        let data = toy_data(15, 2, 6, |x| x[0].sin() + x[1] + 2.0);
        let sq = fit(&data, &FitConfig { starts: 2, ..FitConfig::new(ModelVariant::SqExp) }, RngState::new(2)).unwrap();
        assert_eq!((sq.params().eta, sq.params().lambda), (1.0, 1.0));
        assert!(sq.params().delta().is_infinite());
        let tag = fit(&data, &FitConfig { starts: 2, ..FitConfig::new(ModelVariant::Tag) }, RngState::new(2)).unwrap();
        assert_eq!(tag.params().eta, 0.0);
    }

    #[test]
    fn constant_responses_fail_to_fit() {
        let data = toy_data(8, 2, 7, |_| 3.0);
        assert!(matches!(
            fit(&data, &FitConfig { starts: 2, ..FitConfig::default() }, RngState::new(3)),
            Err(BommError::Fit(_))
        ));
    }

    #[test]
    fn prior_without_data() {
        let data = Dataset::new(Domain::unit(2), DesignMatrix::empty(2), vec![]).unwrap();
        let p = TaagParams::new(1.0, 0.4, 2.5, 0.3, KernelParams::isotropic(2, 0.5)).unwrap();
        let m = FittedTaag::condition(data, p, ModelVariant::Taag, BASE_NUGGET).unwrap();
        assert_eq!(m.posterior_h(&[0.2, 0.9]).unwrap(), (0.4, 2.5));
    }

    #[test]
    fn identity_link_is_affine() {
        let data = toy_data(10, 1, 8, |x| 3.0 + x[0]);
        let p = TaagParams::new(1.0, 0.0, 1.0, 0.0, KernelParams::isotropic(1, 0.3)).unwrap();
        let m = FittedTaag::condition(data.clone(), p, ModelVariant::Tag, BASE_NUGGET).unwrap();
        for x in [0.1, 0.45, 0.8] {
            let (h, _) = m.posterior_h(&[x]).unwrap();
            let f = m.posterior_f_mean(&[x]).unwrap();
            assert!((f - (h + 1.0 - data.shift())).abs() < 1e-12);
        }
    }
}
