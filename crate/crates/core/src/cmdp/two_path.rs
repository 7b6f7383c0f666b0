use super::{Action, ActionSpace, CmdpError};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Two routes to a goal: path 1 is cheap on average with rare cost spikes,
/// path 2 has a constant, slightly higher per-step cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoPathConfig {
    pub path_len: usize,
    pub base_cost: f64,
    pub spike_cost: f64,
    pub spike_prob: f64,
    pub safe_cost: f64,
    /// Goal reward when arriving via path 1 and path 2.
    pub goal_reward: [f64; 2],
}

impl Default for TwoPathConfig {
    fn default() -> Self {
        Self {
            path_len: 10,
            base_cost: 0.4,
            spike_cost: 5.0,
            spike_prob: 0.08,
            safe_cost: 0.9,
            goal_reward: [1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwoPathState {
    Start,
    /// `which` is 0 for path 1 and 1 for path 2; `k` steps already taken.
    Path { which: usize, k: usize },
    Goal { which: usize },
}

#[derive(Debug, Clone)]
pub struct TwoPath {
    cfg: TwoPathConfig,
    state: TwoPathState,
}

impl TwoPath {
    pub fn new(cfg: TwoPathConfig) -> Result<Self, CmdpError> {
        if cfg.path_len == 0 {
            return Err(CmdpError::BadConfig("two_path.path_len must be positive".into()));
        }
        if !(0.0..=1.0).contains(&cfg.spike_prob) {
            return Err(CmdpError::BadConfig("two_path.spike_prob must lie in [0, 1]".into()));
        }
        if cfg.base_cost < 0.0 || cfg.spike_cost < 0.0 || cfg.safe_cost < 0.0 {
            return Err(CmdpError::BadConfig("two_path costs must be nonnegative".into()));
        }
        Ok(Self {
            cfg,
            state: TwoPathState::Start,
        })
    }

    pub fn obs_dim(&self) -> usize {
        4
    }

    pub fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(2)
    }

    pub fn reset(&mut self) {
        self.state = TwoPathState::Start;
    }

    pub fn state(&self) -> TwoPathState {
        self.state
    }

    /// `[at_start, on_path1, on_path2, progress]`.
    pub fn observation(&self) -> Vec<f64> {
        let len = self.cfg.path_len as f64;
        match self.state {
            TwoPathState::Start => vec![1.0, 0.0, 0.0, 0.0],
            TwoPathState::Path { which, k } => {
                let mut o = vec![0.0, 0.0, 0.0, k as f64 / len];
                o[1 + which] = 1.0;
                o
            }
            TwoPathState::Goal { which } => {
                let mut o = vec![0.0, 0.0, 0.0, 1.0];
                o[1 + which] = 1.0;
                o
            }
        }
    }

    /// Deterministic successor of `state` under action index `a`.
    pub fn transition(&self, state: TwoPathState, a: usize) -> TwoPathState {
        match state {
            TwoPathState::Start => TwoPathState::Path { which: a, k: 0 },
            TwoPathState::Path { which, k } if k + 1 >= self.cfg.path_len => {
                TwoPathState::Goal { which }
            }
            TwoPathState::Path { which, k } => TwoPathState::Path { which, k: k + 1 },
            TwoPathState::Goal { which } => TwoPathState::Goal { which },
        }
    }

    pub fn step<R: Rng + ?Sized>(
        &mut self,
        action: &Action,
        rng: &mut R,
    ) -> Result<(f64, f64, bool), CmdpError> {
        let a = match action {
            Action::Discrete(a) if *a < 2 => *a,
            other => return Err(CmdpError::InvalidAction(other.clone())),
        };
        let cost = match self.state {
            TwoPathState::Start => 0.0,
            TwoPathState::Path { which: 0, .. } => {
                let spike = rng.random_bool(self.cfg.spike_prob);
                self.cfg.base_cost + if spike { self.cfg.spike_cost } else { 0.0 }
            }
            TwoPathState::Path { .. } => self.cfg.safe_cost,
            TwoPathState::Goal { .. } => return Err(CmdpError::EpisodeFinished),
        };
        self.state = self.transition(self.state, a);
        let (reward, done) = match self.state {
            TwoPathState::Goal { which } => (self.cfg.goal_reward[which], true),
            _ => (0.0, false),
        };
        Ok((reward, cost, done))
    }
}

#[cfg(test)]
mod tests {
    use crate::cmdp::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn binom_pmf(n: u64, k: u64, p: f64) -> f64 {
        let mut c = 1.0;
        for i in 0..k {
            c *= (n - i) as f64 / (i + 1) as f64;
        }
        c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
    }

    fn run(env: &mut Env, first: usize, seed: u64) -> Vec<Transition> {
        env.reset(seed);
        let mut out = vec![env.step(&Action::Discrete(first)).unwrap()];
        while !out.last().unwrap().ends_episode() {
            out.push(env.step(&Action::Discrete(0)).unwrap());
        }
        out
    }

    #[test]
    fn reset_is_start() {
        let mut env = Env::new(EnvConfig::two_path()).unwrap();
        for seed in [0, 1, 99] {
            assert_eq!(env.reset(seed), vec![1.0, 0.0, 0.0, 0.0]);
            assert_eq!(env.two_path_state(), Some(TwoPathState::Start));
        }
    }

    #[test]
    fn path2_costs_are_constant() {
        let mut env = Env::new(EnvConfig::two_path()).unwrap();
        let trs = run(&mut env, 1, 5);
        assert_eq!(trs.len(), 11);
        assert_eq!(trs[0].cost, 0.0);
        assert!(trs[1..].iter().all(|t| t.cost == 0.9));
        let total: f64 = trs.iter().map(|t| t.cost).sum();
        assert!((total - 9.0).abs() < 1e-12);
        assert!(trs[10].done && !trs[10].truncated);
        assert_eq!(trs[10].reward, 1.0);
    }

    #[test]
    fn stepping_after_goal_is_an_error() {
        let mut env = Env::new(EnvConfig::two_path()).unwrap();
        run(&mut env, 1, 0);
        assert_eq!(
            env.step(&Action::Discrete(0)).unwrap_err(),
            CmdpError::EpisodeFinished
        );
    }

    #[test]
    fn invalid_action_is_rejected() {
        let mut env = Env::new(EnvConfig::two_path()).unwrap();
        env.reset(0);
        assert!(matches!(
            env.step(&Action::Discrete(2)),
            Err(CmdpError::InvalidAction(_))
        ));
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = Env::new(EnvConfig::two_path()).unwrap();
        let mut b = Env::new(EnvConfig::two_path()).unwrap();
        for seed in 0..20 {
            assert_eq!(run(&mut a, 0, seed), run(&mut b, 0, seed));
        }
    }

    #[test]
    fn cloned_env_follows_same_dynamics() {
        let mut env = Env::new(EnvConfig::two_path()).unwrap();
        env.reset(4);
        env.step(&Action::Discrete(0)).unwrap();
        let mut c = env.clone();
        for _ in 0..5 {
            let x = env.step(&Action::Discrete(1)).unwrap();
            let y = c.step(&Action::Discrete(1)).unwrap();
            assert_eq!(x.next_state, y.next_state);
        }
    }

    #[test]
    fn path1_moments_match_binomial() {
        let mut env = Env::new(EnvConfig::two_path()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let sums = episode_cost_sums(&FixedPolicy(Action::Discrete(0)), &mut env, n, 1.0, &mut rng)
            .unwrap();
        let p_out = 1.0 - binom_pmf(10, 0, 0.08) - binom_pmf(10, 1, 0.08);
        let emp_out = sums.iter().filter(|&&s| s > 10.0).count() as f64 / n as f64;
        let sd = (p_out * (1.0 - p_out) / n as f64).sqrt();
        assert!((emp_out - p_out).abs() <= 3.0 * sd, "{emp_out} vs {p_out}");
        assert!((p_out - 0.188).abs() < 1e-3);

        let mean = sums.iter().sum::<f64>() / n as f64;
        let sd_mean = (25.0 * 10.0 * 0.08 * 0.92 / n as f64).sqrt();
        assert!((mean - 8.0).abs() <= 3.0 * sd_mean, "{mean}");
    }
}
