//! Replicated one-shot benchmarks, gap summaries, branch-rate tables and
//! external objectives for the `bomm` estimators.

pub mod external;

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use bomm::design::{maximin_lhd, LhdConfig};
use bomm::estimators::{
    bomm, bomm_plus_with_model, pick_the_winner, sbo_optimize, select_alpha, BatchConfig, BatchTrajectory, Branch,
    DiagnosticConfig, EstimatorResult, Method, SearchConfig,
};
use bomm::testbed::{Objective, OracleFixtures, TestFunction};
use bomm::{fit, BommError, Dataset, FitConfig, FittedTaag, ModelVariant, Result, RngState};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use external::{ExternalMode, ExternalObjective};

/// Offset inside the logarithm of a gap, so exact hits stay finite.
pub const LOG_GAP_EPS: f64 = 1e-12;

const BUNDLED_ORACLE: &str = include_str!("../fixtures/oracle_minima.json");

/// Oracle minima shipped with the crate.
pub fn bundled_oracle() -> OracleFixtures {
    OracleFixtures::from_json(BUNDLED_ORACLE).expect("bundled oracle fixture parses")
}

pub fn load_oracle(path: Option<&Path>) -> Result<OracleFixtures> {
    match path {
        Some(p) => OracleFixtures::load(p),
        None => Ok(bundled_oracle()),
    }
}

/// Oracle minimum of `function`, or an error telling the user how to make one.
pub fn oracle_minimum(fixtures: &OracleFixtures, function: &TestFunction) -> Result<f64> {
    fixtures.get(&function.name()).map(|r| r.f_opt).ok_or_else(|| {
        BommError::InvalidParameter(format!(
            "no oracle minimum for {f}; run `bomm oracle --function {f} --update <fixture.json>` and pass --oracle <fixture.json>",
            f = function.name()
        ))
    })
}

pub enum ObjectiveSpec {
    Builtin(TestFunction),
    External(ExternalObjective),
}

impl ObjectiveSpec {
    pub fn name(&self) -> String {
        match self {
            ObjectiveSpec::Builtin(f) => f.name(),
            ObjectiveSpec::External(e) => e.command().to_string(),
        }
    }

    pub fn as_objective(&self) -> &dyn Objective {
        match self {
            ObjectiveSpec::Builtin(f) => f,
            ObjectiveSpec::External(e) => e,
        }
    }
}

pub struct ExperimentConfig {
    pub objective: ObjectiveSpec,
    /// Sample size; `None` means `10 * d`.
    pub n: Option<usize>,
    pub methods: Vec<Method>,
    pub replications: usize,
    pub seed: u64,
    /// Record wall-clock time per method. Off by default so output is reproducible.
    pub timing: bool,
    pub fit: FitConfig,
    pub diagnostic: DiagnosticConfig,
    pub search: SearchConfig,
    pub maximin_iters: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(objective: ObjectiveSpec, methods: Vec<Method>) -> Self {
        ExperimentConfig {
            objective,
            n: None,
            methods,
            replications: 20,
            seed: 1,
            timing: false,
            fit: FitConfig::new(ModelVariant::Taag),
            diagnostic: DiagnosticConfig::default(),
            search: SearchConfig::default(),
            maximin_iters: None,
        }
    }

    pub fn sample_size(&self) -> usize {
        self.n.unwrap_or(10 * self.objective.as_objective().domain().dims())
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_size() < 2 {
            return Err(BommError::InvalidParameter(format!("n must be >= 2, got {}", self.sample_size())));
        }
        if self.replications < 1 {
            return Err(BommError::InvalidParameter("replications must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(BommError::InvalidParameter("no methods selected".into()));
        }
        self.diagnostic.validate()?;
        self.fit.validate()
    }
}

/// One line of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub x_hat: Vec<f64>,
    pub f_at_x_hat: f64,
    pub gap: Option<f64>,
    pub xi: Option<f64>,
    pub alpha_star: Option<f64>,
    pub branch: Option<Branch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

/// Hash of the exact bits of a dataset's design and responses.
pub fn dataset_fingerprint(data: &Dataset) -> u64 {
    let mut h = DefaultHasher::new();
    for row in data.design().rows() {
        for v in row {
            v.to_bits().hash(&mut h);
        }
    }
    for v in data.responses() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// The shared maximin design of replication `seed`, evaluated.
pub fn replication_dataset(objective: &dyn Objective, n: usize, seed: u64, maximin_iters: Option<usize>) -> Result<Dataset> {
    let dom = objective.domain();
    let mut lhd = LhdConfig::new(n, dom.dims());
    if let Some(it) = maximin_iters {
        lhd.maximin_iters = it;
    }
    let rs = RngState::new(seed);
    let design = maximin_lhd(&lhd, &mut rs.derive_str("design").rng())?.unscaled(&dom)?;
    let y = design
        .rows()
        .iter()
        .map(|x| objective.evaluate(x))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(dom, design, y)
}

fn variant_label(v: ModelVariant) -> &'static str {
    match v {
        ModelVariant::Taag => "fit-taag",
        ModelVariant::SqExp => "fit-sqexp",
        ModelVariant::Tag => "fit-tag",
    }
}

/// Fits each surrogate at most once per replication.
struct ModelCache<'a> {
    data: &'a Dataset,
    fit: &'a FitConfig,
    rng: RngState,
    models: Vec<(ModelVariant, FittedTaag)>,
}

impl<'a> ModelCache<'a> {
    fn get(&mut self, v: ModelVariant) -> Result<&FittedTaag> {
        if let Some(i) = self.models.iter().position(|(m, _)| *m == v) {
            return Ok(&self.models[i].1);
        }
        let mut cfg = self.fit.clone();
        cfg.variant = v;
        if v != ModelVariant::Taag {
            // Range defaults depend on the variant.
            let fresh = FitConfig::new(v);
            cfg.theta_z_range = fresh.theta_z_range;
        }
        let m = fit(self.data, &cfg, self.rng.derive_str(variant_label(v)))?;
        self.models.push((v, m));
        Ok(&self.models.last().expect("just pushed").1)
    }
}

/// Runs a surrogate-based `method` on an already fitted model. `rng` drives
/// the SBO multistarts and the diagnostic's importance sampling.
pub fn estimate_with_model(
    method: Method,
    model: &FittedTaag,
    diagnostic: &DiagnosticConfig,
    search: &SearchConfig,
    rng: RngState,
) -> Result<EstimatorResult> {
    let grid = diagnostic.grid_size;
    match method {
        Method::Pw => pick_the_winner(model.data()),
        Method::SboSqExp | Method::SboTaag | Method::SboTag => sbo_optimize(model, search, rng),
        Method::Bomm => bomm(model, grid),
        Method::BommTail => {
            let (alpha, x) = select_alpha(model, &diagnostic.alpha_grid, grid)?;
            Ok(EstimatorResult {
                method,
                x_hat: x,
                xi: None,
                alpha_star: Some(alpha),
                branch: Some(Branch::Tail),
                f_at_x_hat: None,
            })
        }
        Method::BommPlus => bomm_plus_with_model(model, diagnostic, rng),
    }
}

fn run_method(method: Method, cache: &mut ModelCache<'_>, cfg: &ExperimentConfig, rs: &RngState) -> Result<EstimatorResult> {
    match method.model_variant() {
        None => pick_the_winner(cache.data),
        Some(v) => estimate_with_model(method, cache.get(v)?, &cfg.diagnostic, &cfg.search, rs.derive_str(method.label())),
    }
}

fn clamp_gap(gap: f64, method: Method, seed: u64) -> f64 {
    if gap < 0.0 {
        warn!("{method} seed {seed}: gap {gap:e} below the oracle minimum, clamped to 0");
        0.0
    } else {
        gap
    }
}

fn run_replication(cfg: &ExperimentConfig, r: usize, f_opt: Option<f64>) -> Result<Vec<RunRecord>> {
    let seed = cfg.seed + r as u64;
    let objective = cfg.objective.as_objective();
    let data = replication_dataset(objective, cfg.sample_size(), seed, cfg.maximin_iters)?;
    let fingerprint = dataset_fingerprint(&data);
    let rs = RngState::new(seed);
    let mut cache = ModelCache {
        data: &data,
        fit: &cfg.fit,
        rng: rs.clone(),
        models: Vec::new(),
    };
    let mut out = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let t0 = Instant::now();
        let est = run_method(method, &mut cache, cfg, &rs)?;
        let f = match est.f_at_x_hat {
            Some(f) => f,
            None => objective.evaluate(&est.x_hat)?,
        };
        let wall = t0.elapsed().as_secs_f64() * 1e3;
        if dataset_fingerprint(&data) != fingerprint {
            return Err(BommError::InvalidData(format!("dataset of seed {seed} changed during {method}")));
        }
        out.push(RunRecord {
            method,
            seed,
            x_hat: est.x_hat,
            f_at_x_hat: f,
            gap: f_opt.map(|o| clamp_gap(f - o, method, seed)),
            xi: est.xi,
            alpha_star: est.alpha_star,
            branch: est.branch,
            wall_ms: cfg.timing.then_some(wall),
        });
    }
    info!("replication seed {seed} done");
    Ok(out)
}

/// Runs every replication; `f_opt` turns on gap computation.
pub fn run_replications(cfg: &ExperimentConfig, f_opt: Option<f64>) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let per_rep: Vec<Vec<RunRecord>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| run_replication(cfg, r, f_opt))
        .collect::<Result<_>>()?;
    let mut records: Vec<RunRecord> = per_rep.into_iter().flatten().collect();
    canonical_order(&mut records);
    Ok(records)
}

/// Benchmarks a built-in function against its oracle minimum. External
/// objectives have no oracle, so their records carry no gap.
pub fn run_experiment(cfg: &ExperimentConfig, fixtures: &OracleFixtures) -> Result<Vec<RunRecord>> {
    let f_opt = match &cfg.objective {
        ObjectiveSpec::Builtin(f) => Some(oracle_minimum(fixtures, f)?),
        ObjectiveSpec::External(_) => None,
    };
    run_replications(cfg, f_opt)
}

/// Runs methods against an external objective and summarizes the values found.
pub fn run_external(cfg: &ExperimentConfig) -> Result<Vec<GapSummary>> {
    let records = run_replications(cfg, None)?;
    Ok(summarize(&records))
}

pub fn canonical_order(records: &mut [RunRecord]) {
    records.sort_by(|a, b| a.method.cmp(&b.method).then(a.seed.cmp(&b.seed)));
}

pub fn write_jsonl<W: Write>(records: &[RunRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Per-method statistics. `metric` is `gap` when an oracle minimum was
/// available and `f` (the objective value reached) otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub method: Method,
    pub metric: String,
    pub values: Vec<f64>,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub log_values: Vec<f64>,
    pub median_log: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn log_gap(gap: f64) -> f64 {
    (gap + LOG_GAP_EPS).ln()
}

impl GapSummary {
    pub fn new(method: Method, metric: &str, values: Vec<f64>) -> Self {
        let mut s = values.clone();
        s.sort_by(f64::total_cmp);
        let log_values: Vec<f64> = values.iter().map(|&g| log_gap(g)).collect();
        let mut ls = log_values.clone();
        ls.sort_by(f64::total_cmp);
        GapSummary {
            method,
            metric: metric.into(),
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[s.len() - 1],
            median_log: quantile(&ls, 0.5),
            log_values,
            values,
        }
    }
}

/// Groups records by method (in method order, replications by seed).
pub fn summarize(records: &[RunRecord]) -> Vec<GapSummary> {
    let mut groups: BTreeMap<Method, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.method).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(m, mut rs)| {
            rs.sort_by_key(|r| r.seed);
            if rs.iter().all(|r| r.gap.is_some()) {
                GapSummary::new(m, "gap", rs.iter().map(|r| r.gap.expect("checked")).collect())
            } else {
                GapSummary::new(m, "f", rs.iter().map(|r| r.f_at_x_hat).collect())
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(summaries: &[GapSummary], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["method", "metric", "count", "min", "q1", "median", "q3", "max", "median_log"])?;
    for s in summaries {
        wr.write_record([
            s.method.label().to_string(),
            s.metric.clone(),
            s.values.len().to_string(),
            s.min.to_string(),
            s.q1.to_string(),
            s.median.to_string(),
            s.q3.to_string(),
            s.max.to_string(),
            s.median_log.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRate {
    pub lambda_int: f64,
    pub tail: usize,
    pub replications: usize,
    pub rate: f64,
}

/// Fraction of replications in which the diagnostic-driven estimator takes
/// the tail branch on the custom exponential function, per interaction strength.
/// Uses `cfg.n`, `cfg.replications`, `cfg.seed` and the model settings; the
/// objective and methods of `cfg` are ignored.
pub fn run_nonadditivity_suite(lambda_ints: &[f64], cfg: &ExperimentConfig) -> Result<Vec<BranchRate>> {
    let mut out = Vec::with_capacity(lambda_ints.len());
    for &lam in lambda_ints {
        let f = TestFunction::custom_exp(lam)?;
        let sub = ExperimentConfig {
            objective: ObjectiveSpec::Builtin(f),
            n: cfg.n,
            methods: vec![Method::BommPlus],
            replications: cfg.replications,
            seed: cfg.seed,
            timing: false,
            fit: cfg.fit.clone(),
            diagnostic: cfg.diagnostic.clone(),
            search: cfg.search.clone(),
            maximin_iters: cfg.maximin_iters,
        };
        let records = run_replications(&sub, None)?;
        let tail = records.iter().filter(|r| r.branch == Some(Branch::Tail)).count();
        out.push(BranchRate {
            lambda_int: lam,
            tail,
            replications: records.len(),
            rate: tail as f64 / records.len() as f64,
        });
    }
    Ok(out)
}

pub fn write_branch_rates_csv<W: Write>(rates: &[BranchRate], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["lambda_int", "tail", "replications", "rate"])?;
    for r in rates {
        wr.write_record([
            r.lambda_int.to_string(),
            r.tail.to_string(),
            r.replications.to_string(),
            r.rate.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// One line per batch iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchRecord {
    pub iteration: usize,
    pub evaluations: usize,
    pub x_hat: Vec<f64>,
    pub f_at_x_hat: Option<f64>,
    pub best_value: f64,
    pub xi: Option<f64>,
    pub alpha_star: Option<f64>,
    pub branch: Option<Branch>,
}

pub fn batch_records(t: &BatchTrajectory) -> Vec<BatchRecord> {
    t.steps
        .iter()
        .map(|s| BatchRecord {
            iteration: s.iteration,
            evaluations: s.evaluations,
            x_hat: s.estimate.x_hat.clone(),
            f_at_x_hat: s.estimate.f_at_x_hat,
            best_value: s.best_value,
            xi: s.estimate.xi,
            alpha_star: s.estimate.alpha_star,
            branch: s.estimate.branch,
        })
        .collect()
}

pub fn default_batch(n_ini: usize, b: usize, budget: usize) -> BatchConfig {
    BatchConfig {
        n_ini,
        b,
        budget,
        maximin_iters: None,
    }
}
