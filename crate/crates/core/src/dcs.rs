//! History-length sampling for rollouts.
//!
//! Each rollout member sees the most recent `tau` history pairs, with `tau`
//! drawn from `{0, ..., N}`. Under the exponential schedule the weight on
//! long histories grows with training progress `u / T`:
//!
//! ```text
//! lambda(u) = lambda_max * min(1, u / (alpha * T))
//! P(tau)    = exp(lambda * tau) / sum_j exp(lambda * j)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcsSchedule {
    /// Always the full window.
    Fixed,
    Uniform,
    ExpBias,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcsConfig {
    pub schedule: DcsSchedule,
    pub lambda_max: f64,
    pub alpha: f64,
}

impl Default for DcsConfig {
    fn default() -> Self {
        DcsConfig {
            schedule: DcsSchedule::ExpBias,
            lambda_max: 2.0,
            alpha: 1.0 / 3.0,
        }
    }
}

impl DcsConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_max.is_finite() || self.lambda_max < 0.0 {
            return Err(Error::ConfigValidation("lambda_max must be finite and >= 0".into()));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::ConfigValidation("alpha must be > 0".into()));
        }
        Ok(())
    }

    /// Sampling distribution over `0..=window` at step `u` of `total_steps`.
    pub fn pmf(&self, window: usize, u: usize, total_steps: usize) -> Vec<f64> {
        match self.schedule {
            DcsSchedule::Fixed => {
                let mut p = vec![0.0; window + 1];
                p[window] = 1.0;
                p
            }
            DcsSchedule::Uniform => uniform_pmf(window),
            DcsSchedule::ExpBias => {
                expbias_pmf(window, lambda_at(u, total_steps, self.lambda_max, self.alpha))
            }
        }
    }
}

/// Bias strength at step `u`; reaches `lambda_max` after `alpha * T` steps.
pub fn lambda_at(u: usize, total_steps: usize, lambda_max: f64, alpha: f64) -> f64 {
    let ramp = alpha * total_steps as f64;
    if ramp <= 0.0 {
        return lambda_max;
    }
    lambda_max * (u as f64 / ramp).min(1.0)
}

pub fn expbias_pmf(window: usize, lambda: f64) -> Vec<f64> {
    // Shift by the largest exponent so large lambda cannot overflow.
    let top = (0..=window).map(|j| lambda * j as f64).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = (0..=window).map(|j| (lambda * j as f64 - top).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

pub fn uniform_pmf(window: usize) -> Vec<f64> {
    vec![1.0 / (window + 1) as f64; window + 1]
}

/// Inverse-CDF draw from `pmf`.
pub fn sample_tau<R: Rng + ?Sized>(pmf: &[f64], rng: &mut R) -> Result<usize> {
    if pmf.is_empty() {
        return Err(Error::InvalidPmf("empty".into()));
    }
    if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidPmf(format!("negative or non-finite entry in {pmf:?}")));
    }
    let total: f64 = pmf.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidPmf(format!("sums to {total}")));
    }
    let r: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, p) in pmf.iter().enumerate() {
        acc += p;
        if r < acc {
            return Ok(i);
        }
    }
    // Rounding can leave r just above the final cumulative sum.
    Ok(pmf.iter().rposition(|p| *p > 0.0).unwrap_or(pmf.len() - 1))
}
