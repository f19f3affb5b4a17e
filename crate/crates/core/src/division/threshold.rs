use serde::{Deserialize, Serialize};

use crate::error::{PcsrError, Result};

/// Feedback controller for the refinement threshold `tau`.
///
/// Each update moves the target utilization linearly from `lambda_min` to
/// `lambda_max` over training, nudges `tau` against the utilization error with
/// gain `k` and smooths the move with an exponential moving average of rate `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdController {
    pub tau: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub k: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStep {
    pub lambda_target: f64,
    pub tau_target: f64,
    pub tau: f64,
}

impl Default for ThresholdController {
    fn default() -> Self {
        ThresholdController {
            tau: 0.0,
            lambda_min: 0.4,
            lambda_max: 0.9,
            k: 0.2,
            beta: 0.7,
        }
    }
}

impl ThresholdController {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(PcsrError::config(format!("tau must be ≥ 0, got {}", self.tau)));
        }
        if !(0.0 <= self.lambda_min && self.lambda_min <= self.lambda_max && self.lambda_max <= 1.0) {
            return Err(PcsrError::config(format!(
                "need 0 ≤ lambda_min ≤ lambda_max ≤ 1, got {} and {}",
                self.lambda_min, self.lambda_max
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(PcsrError::config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if !(self.k >= 0.0) || !self.k.is_finite() {
            return Err(PcsrError::config(format!("k must be ≥ 0, got {}", self.k)));
        }
        Ok(())
    }

    pub fn lambda_target(&self, t: usize, total: usize) -> f64 {
        self.lambda_min + (self.lambda_max - self.lambda_min) * t as f64 / total as f64
    }

    /// Applies one update at step `t` of `total` and returns the new state.
    pub fn update(&mut self, lambda_current: f64, t: usize, total: usize) -> Result<ThresholdStep> {
        if total == 0 || t > total {
            return Err(PcsrError::config(format!("need 0 ≤ t ≤ T with T > 0, got t={t}, T={total}")));
        }
        if !(0.0..=1.0).contains(&lambda_current) {
            return Err(PcsrError::Logic(format!("utilization {lambda_current} outside [0, 1]")));
        }
        let lambda_target = self.lambda_target(t, total);
        let tau_target = self.tau - self.k * (lambda_target - lambda_current);
        self.tau = ((1.0 - self.beta) * self.tau + self.beta * tau_target).max(0.0);
        Ok(ThresholdStep {
            lambda_target,
            tau_target,
            tau: self.tau,
        })
    }
}
