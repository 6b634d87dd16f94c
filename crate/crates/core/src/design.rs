//! Latin hypercube designs on the unit cube.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DesignMatrix;
use crate::error::{BommError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LhdConfig {
    pub n: usize,
    pub d: usize,
    pub maximin_iters: usize,
    pub restarts: usize,
    /// Place points at bin centres instead of uniformly within bins.
    pub midpoint: bool,
}

impl LhdConfig {
    /// `10_000 * d` swap iterations over the best of 5 random starts.
    pub fn new(n: usize, d: usize) -> Self {
        LhdConfig {
            n,
            d,
            maximin_iters: 10_000 * d,
            restarts: 5,
            midpoint: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.d < 1 {
            return Err(BommError::InvalidParameter(format!(
                "maximin LHD needs n >= 2 and d >= 1, got n={} d={}",
                self.n, self.d
            )));
        }
        if self.restarts < 1 {
            return Err(BommError::InvalidParameter("restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// One point per bin `[(i-1)/n, i/n)` in every column.
pub fn random_lhd<R: Rng + ?Sized>(n: usize, d: usize, midpoint: bool, rng: &mut R) -> DesignMatrix {
    let mut points = vec![vec![0.0; d]; n];
    let mut bins: Vec<usize> = (0..n).collect();
    for l in 0..d {
        bins.shuffle(rng);
        for (i, &b) in bins.iter().enumerate() {
            let offset = if midpoint { 0.5 } else { rng.random::<f64>() };
            points[i][l] = (b as f64 + offset) / n as f64;
        }
    }
    // Distinct bins in every column make duplicate rows impossible.
    DesignMatrix::new(d, points).expect("LHD rows are distinct")
}

/// Maximin design plus the non-decreasing trace of its minimum distance.
#[derive(Debug, Clone)]
pub struct MaximinOutcome {
    pub design: DesignMatrix,
    pub min_distance: f64,
    pub trace: Vec<f64>,
}

pub fn maximin_lhd<R: Rng + ?Sized>(cfg: &LhdConfig, rng: &mut R) -> Result<DesignMatrix> {
    Ok(maximin_lhd_traced(cfg, rng)?.design)
}

/// Best of `restarts` random LHDs, improved by random within-column swaps
/// that never decrease the minimum pairwise distance.
pub fn maximin_lhd_traced<R: Rng + ?Sized>(cfg: &LhdConfig, rng: &mut R) -> Result<MaximinOutcome> {
    cfg.validate()?;
    let (n, d) = (cfg.n, cfg.d);
    let mut best: Option<(f64, DesignMatrix)> = None;
    for _ in 0..cfg.restarts {
        let cand = random_lhd(n, d, cfg.midpoint, rng);
        let md = cand.min_distance();
        if best.as_ref().is_none_or(|(b, _)| md > *b) {
            best = Some((md, cand));
        }
    }
    let (_, start) = best.expect("restarts >= 1");
    let mut pts = start.into_rows();

    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sq_dist(&pts[i], &pts[j]);
            dist[i * n + j] = v;
            dist[j * n + i] = v;
        }
    }
    let (mut min_sq, mut argmin) = global_min(&dist, n);
    let mut trace = vec![min_sq.sqrt()];
    let mut new_i = vec![0.0; n];
    let mut new_j = vec![0.0; n];

    for _ in 0..cfg.maximin_iters {
        let col = rng.random_range(0..d);
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let (xi, xj) = (pts[i][col], pts[j][col]);
        let mut ok = true;
        for k in 0..n {
            if k == i || k == j {
                continue;
            }
            let xk = pts[k][col];
            new_i[k] = dist[i * n + k] - (xi - xk).powi(2) + (xj - xk).powi(2);
            new_j[k] = dist[j * n + k] - (xj - xk).powi(2) + (xi - xk).powi(2);
            if new_i[k] < min_sq || new_j[k] < min_sq {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        pts[i][col] = xj;
        pts[j][col] = xi;
        for k in 0..n {
            if k == i || k == j {
                continue;
            }
            dist[i * n + k] = new_i[k];
            dist[k * n + i] = new_i[k];
            dist[j * n + k] = new_j[k];
            dist[k * n + j] = new_j[k];
        }
        // d(i, j) is unchanged by swapping one shared column.
        let touched = argmin.0 == i || argmin.0 == j || argmin.1 == i || argmin.1 == j;
        if touched {
            let (m, a) = global_min(&dist, n);
            debug_assert!(m >= min_sq);
            if m > min_sq {
                trace.push(m.sqrt());
            }
            min_sq = m;
            argmin = a;
        }
    }
    let design = DesignMatrix::new(d, pts)?;
    Ok(MaximinOutcome {
        min_distance: min_sq.sqrt(),
        design,
        trace,
    })
}

/// Exploration points for one batch: a fresh random LHD of `count` rows.
pub fn augment_batch<R: Rng + ?Sized>(existing: &DesignMatrix, count: usize, rng: &mut R) -> DesignMatrix {
    if count == 0 {
        return DesignMatrix::empty(existing.dims());
    }
    random_lhd(count, existing.dims(), false, rng)
}

/// True when every column hits each of the `n` bins exactly once.
pub fn is_latin_hypercube(design: &DesignMatrix) -> bool {
    let n = design.len();
    (0..design.dims()).all(|l| {
        let mut bins: Vec<usize> = design
            .column(l)
            .iter()
            .map(|&v| ((v * n as f64).floor() as usize).min(n.saturating_sub(1)))
            .collect();
        bins.sort_unstable();
        bins.iter().enumerate().all(|(i, &b)| i == b)
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn global_min(dist: &[f64], n: usize) -> (f64, (usize, usize)) {
    let mut m = f64::INFINITY;
    let mut a = (0, 0);
    for i in 0..n {
        for j in (i + 1)..n {
            if dist[i * n + j] < m {
                m = dist[i * n + j];
                a = (i, j);
            }
        }
    }
    (m, a)
}
