//! One-parameter Box-Cox link `phi_lambda` and its inverse.
//!
//! `inverse` maps positive data to the latent scale, `forward` maps back.
//! The standard `(z^lambda - 1) / lambda` form is used for every nonzero
//! lambda, so the inverse is strictly increasing in `z` on both sides of 0.

use serde::{Deserialize, Serialize};

use crate::error::{BommError, Result};

/// Below this magnitude the log branch is used.
pub const LAMBDA_LOG_GUARD: f64 = 1e-8;

/// Search range for lambda during fitting.
pub const LAMBDA_RANGE: (f64, f64) = (-2.0, 2.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCox {
    pub lambda: f64,
}

impl BoxCox {
    pub fn new(lambda: f64) -> Self {
        BoxCox { lambda }
    }

    fn is_log(&self) -> bool {
        self.lambda.abs() < LAMBDA_LOG_GUARD
    }

    /// Data to latent: `log z` or `(z^lambda - 1) / lambda`.
    pub fn inverse(&self, z: f64) -> Result<f64> {
        if !(z > 0.0) || !z.is_finite() {
            return Err(BommError::Positivity(z));
        }
        Ok(self.inverse_unchecked(z))
    }

    pub fn inverse_unchecked(&self, z: f64) -> f64 {
        if self.is_log() {
            z.ln()
        } else {
            // exp_m1 keeps precision when lambda * ln z is small.
            (self.lambda * z.ln()).exp_m1() / self.lambda
        }
    }

    /// Open interval of latent values reachable by `inverse`.
    pub fn latent_range(&self) -> (f64, f64) {
        if self.is_log() {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else if self.lambda > 0.0 {
            (-1.0 / self.lambda, f64::INFINITY)
        } else {
            (f64::NEG_INFINITY, -1.0 / self.lambda)
        }
    }

    /// Latent to data: `exp y` or `(1 + lambda y)^(1 / lambda)`.
    pub fn forward(&self, y: f64) -> Result<f64> {
        let (lower, upper) = self.latent_range();
        if !(y > lower && y < upper) {
            return Err(BommError::Range {
                value: y,
                lower,
                upper,
            });
        }
        Ok(if self.is_log() {
            y.exp()
        } else {
            ((self.lambda * y).ln_1p() / self.lambda).exp()
        })
    }

    /// `d inverse / dz = z^(lambda - 1)`.
    pub fn d_inverse_dz(&self, z: f64) -> Result<f64> {
        if !(z > 0.0) || !z.is_finite() {
            return Err(BommError::Positivity(z));
        }
        Ok(if self.is_log() {
            1.0 / z
        } else {
            z.powf(self.lambda - 1.0)
        })
    }

    /// `sum_i log d inverse / dz (z_i)` for positive inputs.
    pub fn log_jacobian(&self, zs: &[f64]) -> f64 {
        let lam = if self.is_log() { 0.0 } else { self.lambda };
        (lam - 1.0) * zs.iter().map(|z| z.ln()).sum::<f64>()
    }
}
