use super::{NnError, ParamStore};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the whole gradient when its L2 norm exceeds this value.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

/// Adam with bias correction over every value of one [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; the store is left untouched on error.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[f64]) -> Result<(), NnError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(NnError::DimensionMismatch {
                context: "adam gradient",
                expected: params.len(),
                got: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient {
                slice: params.slice_name_at(i).unwrap_or("?").to_string(),
            });
        }
        let c = self.config;
        let scale = match c.max_grad_norm {
            Some(max) => {
                let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (k, p) in params.values_mut().iter_mut().enumerate() {
            let g = grads[k] * scale;
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g;
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g;
            let mh = self.m[k] / bc1;
            let vh = self.v[k] / bc2;
            *p -= c.lr * mh / (vh.sqrt() + c.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add_zeros("x", 1, vals.len());
        s.slice_mut(id).copy_from_slice(vals);
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(&[1.0, -2.0]);
        let mut opt = Adam::new(AdamConfig::default(), 2);
        opt.step(&mut s, &[0.0, 0.0]).unwrap();
        assert_eq!(s.values(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut s = store(&[0.0, 0.0, 0.0]);
        let mut opt = Adam::new(AdamConfig::default(), 3);
        opt.step(&mut s, &[3.0, -0.5, 1e-3]).unwrap();
        for (p, sign) in s.values().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((p - sign * 1e-4).abs() < 1e-4 * 1e-4, "{p}");
        }
    }

    #[test]
    fn descends_a_quadratic() {
        let mut s = store(&[1.0]);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            1,
        );
        for _ in 0..1000 {
            let g = 2.0 * s.values()[0];
            opt.step(&mut s, &[g]).unwrap();
        }
        assert!(s.values()[0].abs() < 0.1);
    }

    #[test]
    fn non_finite_gradient_names_the_slice() {
        let mut s = ParamStore::new();
        s.add_zeros("a", 1, 2);
        s.add_zeros("policy.b0", 1, 2);
        let mut opt = Adam::new(AdamConfig::default(), 4);
        let err = opt.step(&mut s, &[0.0, 0.0, 1.0, f64::NAN]).unwrap_err();
        assert_eq!(
            err,
            NnError::NonFiniteGradient {
                slice: "policy.b0".into()
            }
        );
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn gradient_norm_clipping_bounds_the_moment() {
        let mut s = store(&[0.0, 0.0]);
        let mut opt = Adam::new(
            AdamConfig {
                max_grad_norm: Some(1.0),
                ..AdamConfig::default()
            },
            2,
        );
        opt.step(&mut s, &[30.0, 40.0]).unwrap();
        assert!((opt.m[0] - 0.1 * 0.6).abs() < 1e-12);
        assert!((opt.m[1] - 0.1 * 0.8).abs() < 1e-12);
    }
}
