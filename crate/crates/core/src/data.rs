//! Shared data model: box domains, designs, datasets and the seeded RNG contract.
//!
//! All model fitting happens on the unit cube. A [`Dataset`] keeps both the
//! original-unit design and its unit-cube image so downstream modules never
//! rescale on their own.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BommError, Result};

/// Axis-aligned box `[L_1, U_1] x ... x [L_d, U_d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DomainRepr", into = "DomainRepr")]
pub struct Domain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DomainRepr {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<DomainRepr> for Domain {
    type Error = BommError;

    fn try_from(r: DomainRepr) -> Result<Self> {
        Domain::new(r.lower, r.upper)
    }
}

impl From<Domain> for DomainRepr {
    fn from(d: Domain) -> Self {
        DomainRepr {
            lower: d.lower,
            upper: d.upper,
        }
    }
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(BommError::InvalidDomain("domain needs at least one dimension".into()));
        }
        if lower.len() != upper.len() {
            return Err(BommError::InvalidDomain(format!(
                "{} lower bounds but {} upper bounds",
                lower.len(),
                upper.len()
            )));
        }
        for (l, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(BommError::InvalidDomain(format!(
                    "dimension {l}: need finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Domain { lower, upper })
    }

    pub fn from_bounds(bounds: &[(f64, f64)]) -> Result<Self> {
        Domain::new(
            bounds.iter().map(|b| b.0).collect(),
            bounds.iter().map(|b| b.1).collect(),
        )
    }

    pub fn unit(d: usize) -> Self {
        Domain {
            lower: vec![0.0; d],
            upper: vec![1.0; d],
        }
    }

    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, l: usize) -> f64 {
        self.upper[l] - self.lower[l]
    }

    /// `Vol(X_{-l}) = prod_{j != l} (U_j - L_j)`; equals 1 when `d = 1`.
    pub fn volume_excluding(&self, l: usize) -> f64 {
        (0..self.dims()).filter(|&j| j != l).map(|j| self.width(j)).product()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    }

    pub fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims() {
            return Err(BommError::InvalidData(format!(
                "point has {} coordinates, domain has {}",
                x.len(),
                self.dims()
            )));
        }
        for (l, &v) in x.iter().enumerate() {
            if !(v >= self.lower[l] && v <= self.upper[l]) {
                return Err(BommError::DomainViolation {
                    dim: l,
                    value: v,
                    lower: self.lower[l],
                    upper: self.upper[l],
                });
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.check(x).is_ok()
    }

    /// Affine map of `x` onto `[0, 1]^d`.
    pub fn scale_to_unit(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(x.iter()
            .enumerate()
            .map(|(l, &v)| self.scale_coord(l, v))
            .collect())
    }

    pub fn scale_coord(&self, l: usize, v: f64) -> f64 {
        (v - self.lower[l]) / self.width(l)
    }

    pub fn unscale_coord(&self, l: usize, u: f64) -> f64 {
        // Pin the endpoints so unit-cube grids map to the exact bounds.
        if u == 0.0 {
            self.lower[l]
        } else if u == 1.0 {
            self.upper[l]
        } else {
            (self.lower[l] + u * self.width(l)).clamp(self.lower[l], self.upper[l])
        }
    }

    pub fn unscale(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(l, &v)| self.unscale_coord(l, v))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Domain::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Rows `x_1 .. x_n` of a design; duplicate rows are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    dims: usize,
    points: Vec<Vec<f64>>,
}

impl DesignMatrix {
    pub fn new(dims: usize, points: Vec<Vec<f64>>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if p.len() != dims {
                return Err(BommError::InvalidData(format!(
                    "row {i} has {} coordinates, expected {dims}",
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(BommError::InvalidData(format!("row {i} is not finite")));
            }
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| {
            points[a]
                .iter()
                .zip(&points[b])
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        for w in order.windows(2) {
            if points[w[0]] == points[w[1]] {
                return Err(BommError::InvalidData(format!(
                    "rows {} and {} are identical",
                    w[0].min(w[1]),
                    w[0].max(w[1])
                )));
            }
        }
        Ok(DesignMatrix { dims, points })
    }

    pub fn empty(dims: usize) -> Self {
        DesignMatrix {
            dims,
            points: Vec::new(),
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn column(&self, l: usize) -> Vec<f64> {
        self.points.iter().map(|p| p[l]).collect()
    }

    pub fn into_rows(self) -> Vec<Vec<f64>> {
        self.points
    }

    pub fn validate_in(&self, domain: &Domain) -> Result<()> {
        self.points.iter().try_for_each(|p| domain.check(p))
    }

    /// Maps a unit-cube design onto `domain`.
    pub fn unscaled(&self, domain: &Domain) -> Result<DesignMatrix> {
        DesignMatrix::new(
            self.dims,
            self.points.iter().map(|p| domain.unscale(p)).collect(),
        )
    }

    /// Smallest pairwise Euclidean distance; `+inf` for fewer than two rows.
    pub fn min_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                let d2: f64 = self.points[i]
                    .iter()
                    .zip(&self.points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                best = best.min(d2);
            }
        }
        best.sqrt()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record((1..=self.dims).map(|l| format!("x{l}")))?;
        for p in &self.points {
            wtr.write_record(p.iter().map(|v| v.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Evaluated design together with the positivity shift applied before Box-Cox.
#[derive(Debug, Clone)]
pub struct Dataset {
    domain: Domain,
    design: DesignMatrix,
    unit: Vec<Vec<f64>>,
    responses: Vec<f64>,
    shifted: Vec<f64>,
    shift: f64,
}

impl Dataset {
    pub fn new(domain: Domain, design: DesignMatrix, responses: Vec<f64>) -> Result<Self> {
        if design.dims() != domain.dims() {
            return Err(BommError::InvalidData(format!(
                "design has {} columns, domain has {} dimensions",
                design.dims(),
                domain.dims()
            )));
        }
        if design.len() != responses.len() {
            return Err(BommError::InvalidData(format!(
                "{} design rows but {} responses",
                design.len(),
                responses.len()
            )));
        }
        design.validate_in(&domain)?;
        let (shifted, shift) = if responses.is_empty() {
            (Vec::new(), 0.0)
        } else {
            shift_for_positivity(&responses)?
        };
        let unit = design
            .rows()
            .iter()
            .map(|p| domain.scale_to_unit(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            domain,
            design,
            unit,
            responses,
            shifted,
            shift,
        })
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    pub fn unit_points(&self) -> &[Vec<f64>] {
        &self.unit
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    pub fn shifted_responses(&self) -> &[f64] {
        &self.shifted
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.domain.dims()
    }

    /// Appends evaluated points, recomputing the shift over the union.
    pub fn extended(&self, points: &[Vec<f64>], values: &[f64]) -> Result<Dataset> {
        let mut rows = self.design.rows().to_vec();
        rows.extend_from_slice(points);
        let mut resp = self.responses.clone();
        resp.extend_from_slice(values);
        Dataset::new(
            self.domain.clone(),
            DesignMatrix::new(self.dims(), rows)?,
            resp,
        )
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.dims()).map(|l| format!("x{l}")).collect();
        header.push("f".into());
        wtr.write_record(&header)?;
        for (p, f) in self.design.rows().iter().zip(&self.responses) {
            wtr.write_record(p.iter().chain(std::iter::once(f)).map(|v| v.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads `x1,...,xd,f` rows; the last column is the response.
    pub fn read_csv<R: Read>(domain: Domain, r: R) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(r);
        let width = rdr.headers()?.len();
        if width != domain.dims() + 1 {
            return Err(BommError::InvalidData(format!(
                "CSV has {width} columns, expected {} (x1..x{}, f)",
                domain.dims() + 1,
                domain.dims()
            )));
        }
        let mut rows = Vec::new();
        let mut resp = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| BommError::InvalidData(format!("bad number {s:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            resp.push(vals[width - 1]);
            rows.push(vals[..width - 1].to_vec());
        }
        Dataset::new(domain.clone(), DesignMatrix::new(domain.dims(), rows)?, resp)
    }

    pub fn load_csv(domain: Domain, path: impl AsRef<Path>) -> Result<Dataset> {
        Dataset::read_csv(domain, std::fs::File::open(path)?)
    }
}

/// Shifts responses so their minimum is exactly 1 when it is below 1.
pub fn shift_for_positivity(responses: &[f64]) -> Result<(Vec<f64>, f64)> {
    if responses.is_empty() {
        return Err(BommError::InvalidData("no responses".into()));
    }
    if let Some(bad) = responses.iter().find(|v| !v.is_finite()) {
        return Err(BommError::InvalidData(format!("non-finite response {bad}")));
    }
    let min = responses.iter().copied().fold(f64::INFINITY, f64::min);
    if min >= 1.0 {
        return Ok((responses.to_vec(), 0.0));
    }
    let shift = 1.0 - min;
    let shifted = responses
        .iter()
        .map(|&v| if v == min { 1.0 } else { v + shift })
        .collect();
    Ok((shifted, shift))
}

/// Seed plus stream counter; every consumer derives its own stream so runs
/// are reproducible regardless of scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, stream: 0 }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        RngState { seed, stream }
    }

    /// Child state for a labelled sub-task.
    pub fn derive(&self, label: u64) -> RngState {
        RngState {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(label.wrapping_add(0x9E37_79B9))),
        }
    }

    pub fn derive_str(&self, label: &str) -> RngState {
        // FNV-1a; stable across platforms and releases.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.derive(h)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
