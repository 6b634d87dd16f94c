//! Benchmark objectives with known structure, plus a brute-force minimizer
//! used to measure optimality gaps.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Domain, RngState};
use crate::error::{BommError, Result};

/// Anything that can be evaluated at a point of its domain.
pub trait Objective: Sync {
    fn domain(&self) -> Domain;
    fn evaluate(&self, x: &[f64]) -> Result<f64>;
}

/// Interaction strengths of the custom exponential function: weak, moderate, strong.
pub const CUSTOM_EXP_LAMBDAS: [f64; 3] = [0.05, 0.3, 0.5];

const CUSTOM_EXP_EPS: f64 = 0.01;
const CUSTOM_EXP_CENTRES: [f64; 9] = [2.5, 3.5, 2.5, 4.0, 2.5, 4.5, 4.5, 3.5, 4.5];
const CUSTOM_EXP_BOUNDS: [(f64, f64); 9] = [
    (0.0, 5.0),
    (1.0, 6.0),
    (0.0, 5.0),
    (1.5, 6.5),
    (0.0, 5.0),
    (2.0, 7.0),
    (2.0, 7.0),
    (1.0, 6.0),
    (2.0, 7.0),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestFunction {
    SixHumpCamel,
    WingWeight,
    OtlCircuit,
    Piston,
    CustomExp { lambda_int: f64 },
}

impl TestFunction {
    pub fn all_standard() -> [TestFunction; 4] {
        [
            TestFunction::SixHumpCamel,
            TestFunction::WingWeight,
            TestFunction::OtlCircuit,
            TestFunction::Piston,
        ]
    }

    pub fn custom_exp(lambda_int: f64) -> Result<Self> {
        if !(lambda_int >= 0.0 && lambda_int.is_finite()) {
            return Err(BommError::InvalidParameter(format!(
                "interaction strength must be >= 0, got {lambda_int}"
            )));
        }
        Ok(TestFunction::CustomExp { lambda_int })
    }

    /// Stable identifier, e.g. `piston` or `custom_exp@0.3`.
    pub fn name(&self) -> String {
        match self {
            TestFunction::SixHumpCamel => "six_hump_camel".into(),
            TestFunction::WingWeight => "wing_weight".into(),
            TestFunction::OtlCircuit => "otl_circuit".into(),
            TestFunction::Piston => "piston".into(),
            TestFunction::CustomExp { lambda_int } => format!("custom_exp@{lambda_int}"),
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            TestFunction::SixHumpCamel | TestFunction::OtlCircuit => 6,
            TestFunction::WingWeight => 10,
            TestFunction::Piston => 7,
            TestFunction::CustomExp { .. } => 9,
        }
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        match self {
            TestFunction::SixHumpCamel => (0..6)
                .map(|l| if l % 2 == 0 { (-2.0, 2.0) } else { (-1.0, 1.0) })
                .collect(),
            TestFunction::WingWeight => vec![
                (150.0, 200.0),
                (220.0, 300.0),
                (6.0, 10.0),
                (-10.0, 10.0),
                (16.0, 45.0),
                (0.5, 1.0),
                (0.08, 0.18),
                (2.5, 6.0),
                (1700.0, 2500.0),
                (0.025, 0.08),
            ],
            TestFunction::OtlCircuit => vec![
                (50.0, 150.0),
                (25.0, 75.0),
                (0.5, 3.0),
                (1.2, 2.5),
                (0.25, 1.2),
                (50.0, 300.0),
            ],
            TestFunction::Piston => vec![
                (30.0, 60.0),
                (0.005, 0.020),
                (0.002, 0.010),
                (1000.0, 5000.0),
                (90_000.0, 110_000.0),
                (290.0, 296.0),
                (340.0, 360.0),
            ],
            TestFunction::CustomExp { .. } => CUSTOM_EXP_BOUNDS.to_vec(),
        }
    }

    /// Evaluates without the domain check.
    pub fn eval_unchecked(&self, x: &[f64]) -> f64 {
        match *self {
            TestFunction::SixHumpCamel => six_hump_camel(x),
            TestFunction::WingWeight => wing_weight(x),
            TestFunction::OtlCircuit => otl_circuit(x),
            TestFunction::Piston => piston(x),
            TestFunction::CustomExp { lambda_int } => custom_exp(x, lambda_int),
        }
    }
}

impl Objective for TestFunction {
    fn domain(&self) -> Domain {
        Domain::from_bounds(&self.bounds()).expect("built-in bounds are valid")
    }

    fn evaluate(&self, x: &[f64]) -> Result<f64> {
        self.domain().check(x)?;
        Ok(self.eval_unchecked(x))
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for TestFunction {
    type Err = BommError;

    /// Accepts the names produced by [`TestFunction::name`]; `custom_exp`
    /// alone means the weak setting.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        match s.as_str() {
            "six_hump_camel" | "six_hump" | "camel" => Ok(TestFunction::SixHumpCamel),
            "wing_weight" | "wing" => Ok(TestFunction::WingWeight),
            "otl_circuit" | "otl" => Ok(TestFunction::OtlCircuit),
            "piston" => Ok(TestFunction::Piston),
            "custom_exp" => TestFunction::custom_exp(CUSTOM_EXP_LAMBDAS[0]),
            other => {
                if let Some(rest) = other.strip_prefix("custom_exp@") {
                    let lam = rest.parse::<f64>().map_err(|e| {
                        BommError::InvalidParameter(format!("bad interaction strength {rest:?}: {e}"))
                    })?;
                    TestFunction::custom_exp(lam)
                } else {
                    Err(BommError::InvalidParameter(format!("unknown test function {other:?}")))
                }
            }
        }
    }
}

/// Three copies of the two-dimensional camel, offset by 5.
pub fn six_hump_camel(x: &[f64]) -> f64 {
    let mut s = 5.0;
    for k in 0..3 {
        let (a, b) = (x[2 * k], x[2 * k + 1]);
        let a2 = a * a;
        let b2 = b * b;
        s += (4.0 - 2.1 * a2 + a2 * a2 / 3.0) * a2 + a * b + (-4.0 + 4.0 * b2) * b2;
    }
    s
}

/// Sweep angle `x[3]` is in degrees.
pub fn wing_weight(x: &[f64]) -> f64 {
    let [sw, wfw, a, sweep, q, taper, tc, nz, wdg, wp] = [x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7], x[8], x[9]];
    let c = sweep.to_radians().cos();
    0.036
        * sw.powf(0.758)
        * wfw.powf(0.0035)
        * (a / (c * c)).powf(0.6)
        * q.powf(0.006)
        * taper.powf(0.04)
        * (100.0 * tc / c).powf(-0.3)
        * (nz * wdg).powf(0.49)
        + sw * wp
}

pub fn otl_circuit(x: &[f64]) -> f64 {
    let [rb1, rb2, rf, rc1, rc2, beta] = [x[0], x[1], x[2], x[3], x[4], x[5]];
    let vb1 = 12.0 * rb2 / (rb1 + rb2);
    let g = beta * (rc2 + 9.0);
    let den = g + rf;
    (vb1 + 0.74) * g / den + 11.35 * rf / den + 0.74 * rf * g / (den * rc1)
}

pub fn piston(x: &[f64]) -> f64 {
    let [m, s, v0, k, p0, ta, t0] = [x[0], x[1], x[2], x[3], x[4], x[5], x[6]];
    let a = p0 * s + 19.62 * m - k * v0 / s;
    let pvt = p0 * v0 / t0;
    let v = s / (2.0 * k) * ((a * a + 4.0 * k * pvt * ta).sqrt() - a);
    2.0 * PI * (m / (k + s * s * pvt * ta / (v * v))).sqrt()
}

/// Additive exponential terms plus `lambda_int` times squared three-way
/// contrasts centred at the domain midpoints. The exponent is read as
/// `exp(-2 / x^((m+1)/2) + eps)`.
pub fn custom_exp(x: &[f64], lambda_int: f64) -> f64 {
    custom_exp_additive(x) + lambda_int * custom_exp_interaction(x)
}

pub fn custom_exp_additive(x: &[f64]) -> f64 {
    let mut s = 0.0;
    for (idx, &v) in x.iter().enumerate().take(9) {
        let m = (idx % 3 + 1) as f64;
        // At v = 0 the exponent is -inf and the term vanishes.
        s += (-2.0 / v.powf((m + 1.0) / 2.0) + CUSTOM_EXP_EPS).exp();
    }
    10.0 * s
}

pub fn custom_exp_interaction(x: &[f64]) -> f64 {
    (0..3)
        .map(|g| {
            let c = |k: usize| x[3 * g + k] - CUSTOM_EXP_CENTRES[3 * g + k];
            let t = c(0) - c(1) - c(2);
            t * t
        })
        .sum()
}

pub fn custom_exp_centres() -> [f64; 9] {
    CUSTOM_EXP_CENTRES
}

/// Minimum found by [`oracle_minimize`], with enough provenance to redo it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub function: String,
    pub x_opt: Vec<f64>,
    pub f_opt: f64,
    pub budget: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct OracleConfig {
    /// Uniform random starts (at least 10^4).
    pub budget: usize,
    pub refine_best: usize,
    pub rounds: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            budget: 1_000_000,
            refine_best: 20,
            rounds: 200,
            seed: 20_240_601,
        }
    }
}

/// Random multistart followed by per-coordinate grid refinement of the best
/// starts. Never returns a value worse than the best random sample.
pub fn oracle_minimize(f: &TestFunction, cfg: &OracleConfig) -> Result<OracleRecord> {
    if cfg.budget < 10_000 {
        return Err(BommError::InvalidParameter(format!(
            "oracle budget must be >= 10^4, got {}",
            cfg.budget
        )));
    }
    let bounds = f.bounds();
    let d = bounds.len();
    let root = RngState::new(cfg.seed).derive_str(&f.name());
    const CHUNK: usize = 10_000;
    let chunks = cfg.budget.div_ceil(CHUNK);
    let keep = cfg.refine_best.max(1);
    let mut pool: Vec<(f64, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = root.derive(c as u64).rng();
            let count = CHUNK.min(cfg.budget - c * CHUNK);
            let mut local: Vec<(f64, Vec<f64>)> = Vec::with_capacity(keep + 1);
            for _ in 0..count {
                let x: Vec<f64> = bounds
                    .iter()
                    .map(|&(lo, hi)| lo + rng.random::<f64>() * (hi - lo))
                    .collect();
                let v = f.eval_unchecked(&x);
                if !v.is_finite() {
                    continue;
                }
                if local.len() < keep || v < local[local.len() - 1].0 {
                    let pos = local.partition_point(|e| e.0 <= v);
                    local.insert(pos, (v, x));
                    local.truncate(keep);
                }
            }
            local
        })
        .flatten()
        .collect();
    pool.sort_by(|a, b| a.0.total_cmp(&b.0));
    pool.truncate(keep);

    let refined: Vec<(f64, Vec<f64>)> = pool
        .into_par_iter()
        .map(|(v, x)| coordinate_refine(f, &bounds, x, v, cfg.rounds))
        .collect();
    let (f_opt, x_opt) = refined
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .ok_or_else(|| BommError::Evaluation("oracle produced no finite values".into()))?;
    debug_assert_eq!(x_opt.len(), d);
    Ok(OracleRecord {
        function: f.name(),
        x_opt,
        f_opt,
        budget: cfg.budget,
        seed: cfg.seed,
    })
}

fn coordinate_refine(
    f: &TestFunction,
    bounds: &[(f64, f64)],
    mut x: Vec<f64>,
    mut fx: f64,
    rounds: usize,
) -> (f64, Vec<f64>) {
    const POINTS: usize = 21;
    let mut radius: Vec<f64> = bounds.iter().map(|(lo, hi)| 0.25 * (hi - lo)).collect();
    for _ in 0..rounds {
        let mut improved = false;
        for l in 0..x.len() {
            let (lo, hi) = bounds[l];
            let a = (x[l] - radius[l]).max(lo);
            let b = (x[l] + radius[l]).min(hi);
            let mut best = (fx, x[l]);
            let mut probe = x.clone();
            for k in 0..POINTS {
                let t = if k == POINTS - 1 {
                    b
                } else {
                    a + (b - a) * k as f64 / (POINTS - 1) as f64
                };
                probe[l] = t;
                let v = f.eval_unchecked(&probe);
                if v < best.0 {
                    best = (v, t);
                }
            }
            if best.0 < fx {
                fx = best.0;
                x[l] = best.1;
                improved = true;
            } else {
                radius[l] *= 0.5;
            }
        }
        if !improved && radius.iter().zip(bounds).all(|(r, (lo, hi))| *r < 1e-13 * (hi - lo)) {
            break;
        }
    }
    (fx, x)
}

/// Versioned collection of oracle minima, keyed by function name.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OracleFixtures {
    pub version: u32,
    pub records: Vec<OracleRecord>,
}

impl OracleFixtures {
    pub fn get(&self, function: &str) -> Option<&OracleRecord> {
        self.records.iter().find(|r| r.function == function)
    }

    /// Replaces any record for the same function.
    pub fn upsert(&mut self, rec: OracleRecord) {
        self.records.retain(|r| r.function != rec.function);
        self.records.push(rec);
        self.records.sort_by(|a, b| a.function.cmp(&b.function));
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn camel_at_origin_and_corner() {
        assert_eq!(six_hump_camel(&[0.0; 6]), 5.0);
        let corner = [2.0, 1.0, 2.0, 1.0, 2.0, 1.0];
        let expected = 3.0 * ((4.0 - 8.4 + 16.0 / 3.0) * 4.0 + 2.0 + 0.0) + 5.0;
        assert!((six_hump_camel(&corner) - expected).abs() < 1e-12);
    }

    #[test]
    fn evaluate_checks_domain() {
        let f = TestFunction::SixHumpCamel;
        assert!(matches!(
            f.evaluate(&[3.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            Err(BommError::DomainViolation { dim: 0, .. })
        ));
        assert!(TestFunction::Piston.evaluate(&[1.0; 3]).is_err());
    }

    #[test]
    fn custom_exp_structure() {
        let m = custom_exp_centres();
        assert_eq!(custom_exp_interaction(&m), 0.0);
        for lam in CUSTOM_EXP_LAMBDAS {
            assert_eq!(custom_exp(&m, lam), custom_exp_additive(&m));
        }
        let x = [1.0, 2.0, 3.0, 4.0, 0.5, 6.0, 2.5, 5.5, 6.5];
        assert_eq!(custom_exp(&x, 0.0), custom_exp_additive(&x));
        assert!(custom_exp_interaction(&x) > 0.0);
        // Zero coordinates are admissible and contribute nothing.
        let mut z = m;
        z[0] = 0.0;
        assert!(custom_exp_additive(&z).is_finite());
    }

    #[test]
    fn names_round_trip() {
        for f in TestFunction::all_standard() {
            assert_eq!(f.name().parse::<TestFunction>().unwrap(), f);
            assert_eq!(f.bounds().len(), f.dims());
        }
        let c: TestFunction = "custom_exp@0.3".parse().unwrap();
        assert_eq!(c, TestFunction::CustomExp { lambda_int: 0.3 });
        assert_eq!(c.name().parse::<TestFunction>().unwrap(), c);
        assert!("rosenbrock".parse::<TestFunction>().is_err());
        assert!("custom_exp@-1".parse::<TestFunction>().is_err());
    }

    #[test]
    fn oracle_budget_guard() {
        let cfg = OracleConfig {
            budget: 100,
            ..Default::default()
        };
        assert!(oracle_minimize(&TestFunction::Piston, &cfg).is_err());
    }

    #[test]
    fn fixtures_upsert() {
        let mut fx = OracleFixtures::default();
        let rec = |f: f64| OracleRecord {
            function: "piston".into(),
            x_opt: vec![0.0],
            f_opt: f,
            budget: 10_000,
            seed: 1,
        };
        fx.upsert(rec(1.0));
        fx.upsert(rec(0.5));
        assert_eq!(fx.records.len(), 1);
        assert_eq!(fx.get("piston").unwrap().f_opt, 0.5);
        let back = OracleFixtures::from_json(&serde_json::to_string(&fx).unwrap()).unwrap();
        assert_eq!(back.records, fx.records);
    }
}
