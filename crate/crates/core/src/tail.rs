//! Weibull approximation of the right tail of the cost-to-go distribution.

use crate::nnfa::{Adam, AdamConfig, Matrix, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound of the shape head, `alpha = ALPHA_MAX * sigmoid(z)`.
pub const ALPHA_MAX: f64 = 4.0;
/// Quantile estimates are floored here before taking logs.
pub const Q_FLOOR: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum TailError {
    #[error("fraction {0} is outside (0, 1)")]
    BadFraction(f64),
    #[error("invalid Weibull parameters alpha={alpha}, beta={beta}")]
    BadParams { alpha: f64, beta: f64 },
    #[error("tail fit needs at least 2 points, got {0}")]
    TooFewPoints(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullParams {
    pub alpha: f64,
    pub beta: f64,
}

impl WeibullParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, TailError> {
        if alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite() {
            Ok(Self { alpha, beta })
        } else {
            Err(TailError::BadParams { alpha, beta })
        }
    }

    /// Maps raw head outputs `(z_alpha, ln_beta)` to parameters.
    pub fn from_raw(z_alpha: f64, ln_beta: f64) -> Self {
        Self {
            alpha: crate::nnfa::OutputActivation::ScaledSigmoid(ALPHA_MAX).apply(z_alpha),
            beta: ln_beta.exp(),
        }
    }
}

pub fn weibull_survival(x: f64, p: WeibullParams) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    (-(x / p.beta).powf(p.alpha)).exp()
}

pub fn weibull_pdf(x: f64, p: WeibullParams) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    let z = x / p.beta;
    (p.alpha / p.beta) * z.powf(p.alpha - 1.0) * (-z.powf(p.alpha)).exp()
}

/// `ln pdf(x)` for `x > 0`, finite wherever the density is positive.
pub fn weibull_log_pdf(x: f64, p: WeibullParams) -> f64 {
    let lz = x.ln() - p.beta.ln();
    p.alpha.ln() - p.beta.ln() + (p.alpha - 1.0) * lz - (p.alpha * lz).exp()
}

/// `c_u = -ln(1 - u)`.
pub fn c_u(u: f64) -> f64 {
    -(-u).ln_1p()
}

pub fn weibull_quantile(u: f64, p: WeibullParams) -> Result<f64, TailError> {
    if !(u > 0.0 && u < 1.0) {
        return Err(TailError::BadFraction(u));
    }
    Ok(p.beta * c_u(u).powf(1.0 / p.alpha))
}

/// `(1/k) sum_i 1/2 (ln beta + ln c_{u_i} / alpha - ln q_i)^2`, with `q_i` floored.
pub fn tail_fit_loss(points: &[(f64, f64)], p: WeibullParams) -> Result<f64, TailError> {
    if points.len() < 2 {
        return Err(TailError::TooFewPoints(points.len()));
    }
    let lb = p.beta.ln();
    let total: f64 = points
        .iter()
        .map(|&(u, q)| {
            let r = lb + c_u(u).ln() / p.alpha - q.max(Q_FLOOR).ln();
            0.5 * r * r
        })
        .sum();
    Ok(total / points.len() as f64)
}

/// Number of entries that hit [`Q_FLOOR`].
pub fn floored_count(q: &[f64]) -> usize {
    q.iter().filter(|&&v| v < Q_FLOOR).count()
}

/// Batched taped tail loss.
///
/// `raw` is the `n x 2` head output `(z_alpha, ln_beta)`; `top_q` holds the
/// detached rightmost `k` quantile estimates per row at fractions `top_u`.
pub fn tail_fit_loss_tape(tape: &mut Tape, raw: Var, top_q: &Matrix, top_u: &[f64]) -> Var {
    let n = top_q.rows;
    let k = top_u.len();
    let za = tape.select_cols(raw, &[0]);
    let ln_beta = tape.select_cols(raw, &[1]);
    let sig = tape.sigmoid(za);
    let alpha = tape.scale(sig, ALPHA_MAX);
    let inv_alpha = tape.recip(alpha);
    let lc = tape.constant(Matrix::row_vector(top_u.iter().map(|&u| c_u(u).ln()).collect()));
    let ones = tape.constant(Matrix::filled(1, k, 1.0));
    let shape_term = tape.matmul(inv_alpha, lc);
    let scale_term = tape.matmul(ln_beta, ones);
    let pred = tape.add(shape_term, scale_term);
    let lq = tape.constant(Matrix::from_vec(
        n,
        k,
        top_q.data.iter().map(|q| q.max(Q_FLOOR).ln()).collect(),
    ));
    let r = tape.sub(pred, lq);
    let sq = tape.square(r);
    let m = tape.mean(sq);
    tape.scale(m, 0.5)
}

/// Fits one `(alpha, beta)` pair to `(u, q)` points by Adam on the raw
/// parameterisation. Returns the fit and its final loss.
pub fn fit_weibull(
    points: &[(f64, f64)],
    init: WeibullParams,
    steps: usize,
    lr: f64,
) -> Result<(WeibullParams, f64), TailError> {
    if points.len() < 2 {
        return Err(TailError::TooFewPoints(points.len()));
    }
    let mut store = ParamStore::new();
    let a = init.alpha / ALPHA_MAX;
    let z0 = (a / (1.0 - a)).ln();
    let id = store.add_zeros("tail.raw", 1, 2);
    store.slice_mut(id).copy_from_slice(&[z0, init.beta.ln()]);
    let top_q = Matrix::row_vector(points.iter().map(|p| p.1).collect());
    let top_u: Vec<f64> = points.iter().map(|p| p.0).collect();
    let mut opt = Adam::new(
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        store.len(),
    );
    for _ in 0..steps {
        let mut tape = Tape::new();
        let raw = tape.param(&store, id);
        let l = tail_fit_loss_tape(&mut tape, raw, &top_q, &top_u);
        let grad = tape
            .backward(l)
            .expect("tail loss is a scalar on this tape")
            .wrt(&store);
        if opt.step(&mut store, &grad).is_err() {
            break;
        }
    }
    let v = store.slice(id);
    let fit = WeibullParams::from_raw(v[0], v[1]);
    let loss = tail_fit_loss(points, fit)?;
    Ok((fit, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::quantile_fractions;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(a: f64, b: f64) -> WeibullParams {
        WeibullParams::new(a, b).unwrap()
    }

    #[test]
    fn survival_values() {
        assert_eq!(weibull_survival(0.0, p(1.7, 3.0)), 1.0);
        for a in [0.5, 1.0, 2.5] {
            assert!((weibull_survival(2.0, p(a, 2.0)) - (-1f64).exp()).abs() < 1e-15);
        }
        assert!((weibull_survival(4.0, p(1.0, 2.0)) - (-2f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn pdf_values_and_normalisation() {
        assert!((weibull_pdf(1e-12, p(1.0, 1.0)) - 1.0).abs() < 1e-9);
        let d = p(1.5, 2.0);
        // substitute x = t^2 to tame the integrand near zero, then Simpson on [0, 8]
        let f = |t: f64| weibull_pdf(t * t, d) * 2.0 * t;
        let (a, b, n) = (0.0, 8.0, 20_000);
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn hazard_identity_at_beta() {
        let d = p(2.3, 1.7);
        let x = d.beta;
        let h = 1e-6;
        let dlog = -(weibull_survival(x + h, d).ln() - weibull_survival(x - h, d).ln()) / (2.0 * h);
        assert!((dlog - weibull_pdf(x, d) / weibull_survival(x, d)).abs() < 1e-6);
        assert!((weibull_log_pdf(x, d) - weibull_pdf(x, d).ln()).abs() < 1e-12);
    }

    #[test]
    fn quantile_values_and_round_trip() {
        let u = 1.0 - (-1f64).exp();
        assert!((weibull_quantile(u, p(1.0, 3.3)).unwrap() - 3.3).abs() < 1e-12);
        let u = 1.0 - (-4f64).exp();
        assert!((weibull_quantile(u, p(2.0, 1.0)).unwrap() - 2.0).abs() < 1e-12);
        assert!(weibull_quantile(1.0, p(1.0, 1.0)).is_err());
        assert!(weibull_quantile(0.0, p(1.0, 1.0)).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let d = p(rng.random_range(0.2..4.0), rng.random_range(0.1..10.0));
            let u = rng.random_range(0.001..0.999);
            let s = weibull_survival(weibull_quantile(u, d).unwrap(), d);
            assert!((s - (1.0 - u)).abs() < 1e-12);
        }
    }

    #[test]
    fn survival_decreases_in_alpha_beyond_beta() {
        for x in [2.5, 3.0, 5.0, 9.0] {
            let mut prev = f64::INFINITY;
            for k in 1..40 {
                let s = weibull_survival(x, p(k as f64 * 0.1, 2.0));
                assert!(s < prev);
                prev = s;
            }
        }
    }

    fn top_points(d: WeibullParams, k: usize) -> Vec<(f64, f64)> {
        let u = quantile_fractions(25).unwrap();
        u[25 - k..]
            .iter()
            .map(|&u| (u, weibull_quantile(u, d).unwrap()))
            .collect()
    }

    #[test]
    fn fit_loss_zero_only_at_truth() {
        let d = p(1.5, 2.0);
        let pts = top_points(d, 8);
        assert!(tail_fit_loss(&pts, d).unwrap() < 1e-28);
        for q in [p(1.6, 2.0), p(1.5, 1.9), p(1.4, 2.1)] {
            assert!(tail_fit_loss(&pts, q).unwrap() > 0.0);
        }
        assert_eq!(tail_fit_loss(&pts[..1], d).unwrap_err(), TailError::TooFewPoints(1));
    }

    #[test]
    fn taped_loss_matches_plain() {
        let d = p(1.5, 2.0);
        let pts = top_points(d, 8);
        let probe = p(2.2, 1.3);
        let a = probe.alpha / ALPHA_MAX;
        let raw = Matrix::from_vec(1, 2, vec![(a / (1.0 - a)).ln(), probe.beta.ln()]);
        let mut t = Tape::new();
        let r = t.constant(raw);
        let top_q = Matrix::row_vector(pts.iter().map(|x| x.1).collect());
        let top_u: Vec<f64> = pts.iter().map(|x| x.0).collect();
        let l = tail_fit_loss_tape(&mut t, r, &top_q, &top_u);
        assert!((t.scalar(l) - tail_fit_loss(&pts, probe).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn floor_is_applied() {
        let pts = [(0.9, 0.0), (0.95, -1.0)];
        let l = tail_fit_loss(&pts, p(1.0, 1.0)).unwrap();
        assert!(l.is_finite());
        assert_eq!(floored_count(&[0.0, -1.0, 1.0]), 2);
    }
}
