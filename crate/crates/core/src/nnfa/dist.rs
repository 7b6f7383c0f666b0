use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian with a state-independent log standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicyOutput {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianPolicyOutput {
    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }
}

pub fn gaussian_logprob(out: &GaussianPolicyOutput, action: &[f64]) -> f64 {
    assert_eq!(out.mean.len(), action.len(), "action dimension");
    assert_eq!(out.mean.len(), out.log_std.len(), "log_std dimension");
    out.mean
        .iter()
        .zip(&out.log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// `KL(p || q)` for diagonal Gaussians.
pub fn kl_diag_gaussian(p: &GaussianPolicyOutput, q: &GaussianPolicyOutput) -> f64 {
    assert_eq!(p.mean.len(), q.mean.len(), "distribution dimension");
    let mut kl = 0.0;
    for k in 0..p.mean.len() {
        let (lp, lq) = (p.log_std[k], q.log_std[k]);
        let vp = (2.0 * lp).exp();
        let vq = (2.0 * lq).exp();
        let d = p.mean[k] - q.mean[k];
        kl += lq - lp + (vp + d * d) / (2.0 * vq) - 0.5;
    }
    kl.max(0.0)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn categorical_log_probs(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `KL(p || q)` for categorical distributions given by logits.
pub fn categorical_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = categorical_log_probs(p_logits);
    let lq = categorical_log_probs(q_logits);
    lp.iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b))
        .sum::<f64>()
        .max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn g(mean: f64, log_std: f64) -> GaussianPolicyOutput {
        GaussianPolicyOutput {
            mean: vec![mean],
            log_std: vec![log_std],
        }
    }

    #[test]
    fn logprob_at_mode_and_unit_offset() {
        assert!((gaussian_logprob(&g(0.7, 0.0), &[0.7]) + 0.5 * LN_2PI).abs() < 1e-15);
        assert!((gaussian_logprob(&g(0.0, 0.0), &[1.0]) + 0.5 + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn density_integrates_to_one() {
        let d = g(0.3, -0.4);
        let h = 1e-3;
        let mass: f64 = (-10_000..10_000)
            .map(|i| gaussian_logprob(&d, &[(i as f64 + 0.5) * h]).exp() * h)
            .sum();
        assert!((mass - 1.0).abs() < 1e-3);
    }

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(kl_diag_gaussian(&g(0.2, 0.1), &g(0.2, 0.1)), 0.0);
        assert!((kl_diag_gaussian(&g(0.0, 0.0), &g(1.0, 0.0)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let p = GaussianPolicyOutput {
            mean: vec![0.3, -1.0],
            log_std: vec![-0.2, 0.4],
        };
        let q = GaussianPolicyOutput {
            mean: vec![-0.1, -0.5],
            log_std: vec![0.1, 0.2],
        };
        let exact = kl_diag_gaussian(&p, &q);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let std = p.std();
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let a: Vec<f64> = (0..2)
                    .map(|k| Normal::new(p.mean[k], std[k]).unwrap().sample(&mut rng))
                    .collect();
                gaussian_logprob(&p, &a) - gaussian_logprob(&q, &a)
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn categorical_helpers() {
        let p = softmax(&[0.0, 0.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let lp = categorical_log_probs(&[1.0, 2.0, 3.0]);
        let total: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-15);
        assert_eq!(categorical_kl(&[0.3, -0.2], &[0.3, -0.2]), 0.0);
        assert!(categorical_kl(&[2.0, 0.0], &[0.0, 0.0]) > 0.0);
    }
}
