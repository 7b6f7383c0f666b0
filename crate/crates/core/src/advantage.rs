//! μ weights, quantile and reward advantages, and their combination.

use crate::tail::{weibull_log_pdf, WeibullParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to the numerator argument `(q_s - c) / gamma`.
pub const TARGET_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum AdvantageError {
    #[error("non-finite mu weight at {context} (log mu = {log_mu})")]
    NonFiniteMu { context: String, log_mu: f64 },
}

/// Which densities enter the weight
/// `mu = p_{s'}((q_s - c) / gamma) / (gamma * p(q_s))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuVariant {
    /// Both densities use the successor's tail parameters.
    #[default]
    SuccessorTail,
    /// The denominator uses the current state's tail parameters.
    StateTail,
    /// Fault fixture: numerator evaluated at `(q_s + c) / gamma`.
    FlippedCostSign,
}

/// Numerator argument `(q_s - c) / gamma` before flooring.
pub fn raw_mu_target(cost: f64, q_s: f64, gamma: f64, variant: MuVariant) -> f64 {
    let signed = match variant {
        MuVariant::FlippedCostSign => q_s + cost,
        _ => q_s - cost,
    };
    signed / gamma
}

/// Numerator argument floored at [`TARGET_FLOOR`], as the Weibull density needs.
pub fn mu_target(cost: f64, q_s: f64, gamma: f64, variant: MuVariant) -> f64 {
    raw_mu_target(cost, q_s, gamma, variant).max(TARGET_FLOOR)
}

/// `ln mu`, computed in log space so that tiny densities do not underflow.
pub fn log_mu_weight(
    cost: f64,
    q_s: f64,
    tail_next: WeibullParams,
    tail_s: WeibullParams,
    gamma: f64,
    variant: MuVariant,
) -> f64 {
    let target = mu_target(cost, q_s, gamma, variant);
    let at = q_s.max(TARGET_FLOOR);
    let den = match variant {
        MuVariant::StateTail => tail_s,
        _ => tail_next,
    };
    weibull_log_pdf(target, tail_next) - gamma.ln() - weibull_log_pdf(at, den)
}

pub fn mu_weight(
    cost: f64,
    q_s: f64,
    tail_next: WeibullParams,
    tail_s: WeibullParams,
    gamma: f64,
    variant: MuVariant,
) -> Result<f64, AdvantageError> {
    let l = log_mu_weight(cost, q_s, tail_next, tail_s, gamma, variant);
    let mu = l.exp();
    if l.is_nan() || !mu.is_finite() {
        return Err(AdvantageError::NonFiniteMu {
            context: format!("q_s={q_s}, cost={cost}"),
            log_mu: l,
        });
    }
    Ok(mu)
}

/// `1 + clip(ln mu, -c_clip, c_clip)`.
pub fn smooth_mu(mu: f64, c_clip: f64) -> f64 {
    smooth_log_mu(mu.ln(), c_clip)
}

pub fn smooth_log_mu(log_mu: f64, c_clip: f64) -> f64 {
    1.0 + log_mu.clamp(-c_clip, c_clip)
}

/// `c + gamma q(s') - q(s)` with a zero bootstrap at terminal transitions.
pub fn td_error(cost: f64, q_s: f64, q_next: f64, gamma: f64, terminal: bool) -> f64 {
    let boot = if terminal { 0.0 } else { gamma * q_next };
    cost + boot - q_s
}

pub fn quantile_advantage(smoothed_mu: f64, td: f64) -> f64 {
    smoothed_mu * td
}

pub fn reward_advantage(reward: f64, v_s: f64, v_next: f64, gamma: f64, terminal: bool) -> f64 {
    td_error(reward, v_s, v_next, gamma, terminal)
}

/// `reward_adv - lambda * quantile_adv`; returns `reward_adv` untouched when `lambda == 0`.
pub fn combined_advantage(reward_adv: f64, quantile_adv: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        reward_adv
    } else {
        reward_adv - lambda * quantile_adv
    }
}

/// `(mu - 1) * (c + gamma q(s'))`.
pub fn additional_cost(mu: f64, cost: f64, gamma_q_next: f64) -> f64 {
    (mu - 1.0) * (cost + gamma_q_next)
}

/// Standardises in place to zero mean and unit variance.
pub fn normalize(adv: &mut [f64]) {
    let n = adv.len();
    if n < 2 {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n as f64;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / sd;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub reward_adv: f64,
    pub quantile_adv: f64,
    pub combined_adv: f64,
    pub raw_mu: f64,
    pub smoothed_mu: f64,
    pub lambda: f64,
}

/// Inputs of one transition, read from frozen critics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionView {
    pub reward: f64,
    pub cost: f64,
    pub terminal: bool,
    pub v_s: f64,
    pub v_next: f64,
    pub q_s: f64,
    pub q_next: f64,
    pub tail_s: WeibullParams,
    pub tail_next: WeibullParams,
}

/// Full advantage record. Terminal transitions use `mu = 1`, since the
/// successor distribution is a point mass at zero.
pub fn advantage_record(
    t: &TransitionView,
    lambda: f64,
    gamma: f64,
    c_clip: f64,
    variant: MuVariant,
) -> Result<AdvantageRecord, AdvantageError> {
    let log_mu = if t.terminal {
        0.0
    } else {
        log_mu_weight(t.cost, t.q_s, t.tail_next, t.tail_s, gamma, variant)
    };
    if log_mu.is_nan() {
        return Err(AdvantageError::NonFiniteMu {
            context: format!("q_s={}, cost={}", t.q_s, t.cost),
            log_mu,
        });
    }
    let smoothed = smooth_log_mu(log_mu, c_clip);
    let qa = quantile_advantage(smoothed, td_error(t.cost, t.q_s, t.q_next, gamma, t.terminal));
    let ra = reward_advantage(t.reward, t.v_s, t.v_next, gamma, t.terminal);
    Ok(AdvantageRecord {
        reward_adv: ra,
        quantile_adv: qa,
        combined_adv: combined_advantage(ra, qa, lambda),
        raw_mu: log_mu.exp(),
        smoothed_mu: smoothed,
        lambda,
    })
}
