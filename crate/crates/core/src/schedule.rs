//! Diffusion variance schedule and the guidance-level-to-start-step mapping.
//!
//! The schedule owns the per-step noise increments beta_t and the derived
//! alpha_t = 1 - beta_t and alpha_bar_t = prod alpha_s tables. A guidance
//! level lambda in [0, 1] selects how far into the chain a source image is
//! noised before denoising: t(lambda) = floor((1 - lambda) * T).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Image-guidance level in [0, 1]. lambda = 1 reproduces the source image,
/// lambda = 0 starts generation from the fully-noised end of the chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceLevel(f64);

impl GuidanceLevel {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) || !lambda.is_finite() {
            return Err(Error::invalid(format!(
                "guidance level must lie in [0, 1], got {lambda}"
            )));
        }
        Ok(GuidanceLevel(lambda))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Tables defining the forward noising process for a T-step chain.
///
/// `beta[t - 1]` holds beta_t for t in 1..=T; `alpha_bar[t]` holds the
/// cumulative product for t in 0..=T with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear beta ramp from `beta_min` to `beta_max` over T steps.
pub fn make_linear_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<VarianceSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::invalid(format!(
            "beta bounds must satisfy 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_min]
    } else {
        (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    VarianceSchedule::from_betas(beta)
}

impl VarianceSchedule {
    /// Build the alpha / alpha_bar tables from explicit beta increments.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if beta.iter().any(|&b| !(0.0..1.0).contains(&b) || b == 0.0) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        let steps = beta.len();
        let alpha: Vec<f64> = beta.iter().map(|&b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0f64;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        if *alpha_bar.last().unwrap() <= 0.0 {
            return Err(Error::invalid("alpha_bar underflowed to zero"));
        }
        Ok(VarianceSchedule {
            steps,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// beta_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps, "beta index {t} out of 1..={}", self.steps);
        self.beta[t - 1]
    }

    /// alpha_t = 1 - beta_t for t in 1..=T.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps, "alpha index {t} out of 1..={}", self.steps);
        self.alpha[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Cumulative product alpha_bar_t; alpha_bar_0 = 1 by convention.
pub fn alpha_bar_at(schedule: &VarianceSchedule, t: usize) -> Result<f64> {
    if t > schedule.steps {
        return Err(Error::StepOutOfRange {
            t,
            max: schedule.steps,
        });
    }
    Ok(schedule.alpha_bar[t])
}

/// Start step t(lambda) = floor((1 - lambda) * T), with a small additive
/// guard so exact rational products (e.g. 0.1 * 50) are not floored down by
/// float representation error. t = 0 means no denoising is performed.
pub fn start_step(lambda: GuidanceLevel, steps: usize) -> usize {
    let raw = (1.0 - lambda.value()) * steps as f64 + 1e-9;
    (raw.floor() as usize).min(steps)
}
