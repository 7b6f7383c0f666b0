//! Value and quantile critics: fractions, Huber pinball losses, TD targets.

use crate::nnfa::{Matrix, Tape, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CriticError {
    #[error("n_q must be at least 1")]
    NoQuantiles,
    #[error("kappa must be positive, got {0}")]
    BadKappa(f64),
    #[error("quantile vector has {values} values but {fractions} fractions")]
    LengthMismatch { values: usize, fractions: usize },
}

/// Midpoint fractions `u_i = (2i - 1) / (2 n_q)` for `i = 1..=n_q`.
pub fn quantile_fractions(n_q: usize) -> Result<Vec<f64>, CriticError> {
    if n_q == 0 {
        return Err(CriticError::NoQuantiles);
    }
    Ok((1..=n_q)
        .map(|i| (2 * i - 1) as f64 / (2 * n_q) as f64)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuberConfig {
    pub kappa: f64,
}

impl HuberConfig {
    pub fn new(kappa: f64) -> Result<Self, CriticError> {
        if kappa > 0.0 && kappa.is_finite() {
            Ok(Self { kappa })
        } else {
            Err(CriticError::BadKappa(kappa))
        }
    }
}

impl Default for HuberConfig {
    fn default() -> Self {
        Self { kappa: 0.1 }
    }
}

pub fn huber(x: f64, kappa: f64) -> f64 {
    let a = x.abs();
    if a <= kappa {
        0.5 * x * x
    } else {
        kappa * (a - 0.5 * kappa)
    }
}

/// `|u - 1{delta < 0}| * huber(delta) / kappa`.
pub fn quantile_huber_loss(delta: f64, u: f64, kappa: f64) -> f64 {
    let w = if delta < 0.0 { 1.0 - u } else { u };
    w * huber(delta, kappa) / kappa
}

/// Critic outputs for one state at fixed fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileVector {
    pub values: Vec<f64>,
    pub fractions: Vec<f64>,
}

impl QuantileVector {
    pub fn new(values: Vec<f64>) -> Result<Self, CriticError> {
        let fractions = quantile_fractions(values.len())?;
        Ok(Self { values, fractions })
    }

    pub fn cost_value(&self) -> f64 {
        cost_value_from_quantiles(&self.values)
    }

    /// Quantile at `u`; exact on a grid fraction, linear between neighbours,
    /// clamped to the outermost estimates.
    pub fn at(&self, u: f64) -> f64 {
        quantile_at(&self.values, &self.fractions, u)
    }

    pub fn is_crossing(&self) -> bool {
        self.values.windows(2).any(|w| w[0] > w[1])
    }
}

pub fn cost_value_from_quantiles(q: &[f64]) -> f64 {
    q.iter().sum::<f64>() / q.len().max(1) as f64
}

/// Reads the `u`-quantile off a fixed fraction grid.
pub fn quantile_at(values: &[f64], fractions: &[f64], u: f64) -> f64 {
    let (lo, hi) = fraction_bracket(fractions, u);
    if lo == hi {
        return values[lo];
    }
    let w = (u - fractions[lo]) / (fractions[hi] - fractions[lo]);
    values[lo] + w * (values[hi] - values[lo])
}

/// Indices of the grid fractions bracketing `u`; equal when `u` is on the grid or outside it.
pub fn fraction_bracket(fractions: &[f64], u: f64) -> (usize, usize) {
    const SNAP: f64 = 1e-9;
    let n = fractions.len();
    if let Some(i) = fractions.iter().position(|f| (f - u).abs() < SNAP) {
        return (i, i);
    }
    if u <= fractions[0] {
        return (0, 0);
    }
    if u >= fractions[n - 1] {
        return (n - 1, n - 1);
    }
    let hi = fractions.iter().position(|&f| f > u).unwrap_or(n - 1);
    (hi - 1, hi)
}

/// Fraction of rows whose quantiles are not nondecreasing.
pub fn crossing_rate(q: &Matrix) -> f64 {
    if q.rows == 0 {
        return 0.0;
    }
    let crossing = (0..q.rows)
        .filter(|&r| q.row(r).windows(2).any(|w| w[0] > w[1]))
        .count();
    crossing as f64 / q.rows as f64
}

/// Targets `c + gamma * q_old(s')`, with a zero bootstrap where `terminal`.
pub fn quantile_td_targets(
    costs: &[f64],
    next_quantiles_old: &Matrix,
    terminal: &[bool],
    gamma: f64,
) -> Matrix {
    let mut t = Matrix::zeros(costs.len(), next_quantiles_old.cols);
    for r in 0..costs.len() {
        let boot = if terminal[r] { 0.0 } else { gamma };
        for (j, v) in t.row_mut(r).iter_mut().enumerate() {
            *v = costs[r] + boot * next_quantiles_old.get(r, j);
        }
    }
    t
}

/// Mean over rows and all `(i, j)` pairs of the Huber pinball loss.
pub fn quantile_td_loss(
    tape: &mut Tape,
    pred: Var,
    targets: Matrix,
    fractions: &[f64],
    huber: HuberConfig,
) -> Var {
    tape.quantile_huber(pred, targets, fractions, huber.kappa)
}

/// Plain evaluation of [`quantile_td_loss`].
pub fn quantile_td_loss_value(
    pred: &Matrix,
    targets: &Matrix,
    fractions: &[f64],
    huber: HuberConfig,
) -> f64 {
    let mut total = 0.0;
    for r in 0..pred.rows {
        for (i, &u) in fractions.iter().enumerate() {
            for &t in targets.row(r) {
                total += quantile_huber_loss(t - pred.get(r, i), u, huber.kappa);
            }
        }
    }
    total / (pred.rows.max(1) * fractions.len() * targets.cols) as f64
}

/// `1/2 * mean((mean_i q_i(s) - C)^2)`.
pub fn cost_value_loss(tape: &mut Tape, quantiles: Var, cost_to_go: &[f64]) -> Var {
    let m = tape.mean_cols(quantiles);
    half_mse(tape, m, cost_to_go)
}

/// `1/2 * mean((V(s) - R)^2)`.
pub fn reward_value_loss(tape: &mut Tape, values: Var, returns: &[f64]) -> Var {
    half_mse(tape, values, returns)
}

fn half_mse(tape: &mut Tape, pred: Var, target: &[f64]) -> Var {
    let t = tape.constant(Matrix::column(target.to_vec()));
    let d = tape.sub(pred, t);
    let sq = tape.square(d);
    let m = tape.mean(sq);
    tape.scale(m, 0.5)
}

/// Discounted sums to go within a segment, seeded with `bootstrap` after the
/// last element unless it ends an episode. `ends[t]` cuts the recursion.
pub fn discounted_to_go(values: &[f64], ends: &[bool], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    let mut acc = bootstrap;
    for t in (0..values.len()).rev() {
        if ends[t] {
            acc = 0.0;
        }
        acc = values[t] + gamma * acc;
        out[t] = acc;
    }
    out
}
