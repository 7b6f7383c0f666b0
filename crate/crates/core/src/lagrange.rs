//! Projected-gradient control of the Lagrange multiplier from recent episode costs.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LagrangeError {
    #[error("cannot take a quantile of an empty sample")]
    Empty,
    #[error("fraction {0} is outside (0, 1)")]
    BadFraction(f64),
}

/// Lower empirical quantile: the `ceil(u n)`-th smallest value.
pub fn empirical_quantile(costs: &[f64], u: f64) -> Result<f64, LagrangeError> {
    if costs.is_empty() {
        return Err(LagrangeError::Empty);
    }
    if !(u > 0.0 && u < 1.0) {
        return Err(LagrangeError::BadFraction(u));
    }
    let mut v = costs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    // guard against u*n landing a hair above an integer through rounding
    let k = ((u * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(v[k.min(n) - 1])
}

/// `max(lambda + eta * (estimate - d_th), 0)`.
pub fn projected_step(lambda: f64, estimate: f64, d_th: f64, eta: f64) -> f64 {
    (lambda + eta * (estimate - d_th)).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintStat {
    /// `(1 - eps0)`-quantile of the window.
    #[default]
    Quantile,
    /// Window mean, for the expected-cost baseline.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub lambda: f64,
    pub eta: f64,
    pub d_th: f64,
    pub eps0: f64,
    pub window: usize,
    pub stat: ConstraintStat,
    episode_costs: VecDeque<f64>,
}

impl LagrangeState {
    pub fn new(eta: f64, d_th: f64, eps0: f64, window: usize, stat: ConstraintStat) -> Self {
        assert!(eta > 0.0 && eps0 > 0.0 && eps0 < 1.0 && window > 0);
        Self {
            lambda: 0.0,
            eta,
            d_th,
            eps0,
            window,
            stat,
            episode_costs: VecDeque::with_capacity(window),
        }
    }

    pub fn push(&mut self, cost_sum: f64) {
        if self.episode_costs.len() == self.window {
            self.episode_costs.pop_front();
        }
        self.episode_costs.push_back(cost_sum);
    }

    pub fn buffer(&self) -> Vec<f64> {
        self.episode_costs.iter().copied().collect()
    }

    pub fn is_warm(&self) -> bool {
        self.episode_costs.len() >= self.window
    }

    /// Constraint statistic of the current buffer, if any episodes are stored.
    pub fn estimate(&self) -> Option<f64> {
        if self.episode_costs.is_empty() {
            return None;
        }
        let v = self.buffer();
        Some(match self.stat {
            ConstraintStat::Quantile => empirical_quantile(&v, 1.0 - self.eps0).ok()?,
            ConstraintStat::Mean => v.iter().sum::<f64>() / v.len() as f64,
        })
    }

    /// One projected step; skipped until the buffer first fills.
    pub fn update(&mut self) -> Option<f64> {
        if !self.is_warm() {
            return None;
        }
        let est = self.estimate()?;
        self.lambda = projected_step(self.lambda, est, self.d_th, self.eta);
        Some(est)
    }
}
