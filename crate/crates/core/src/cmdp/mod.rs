//! Constrained MDP plumbing: transitions, trajectories, rollout collection and
//! the two desk-scale environments.

mod hazard_grid;
mod two_path;

pub use hazard_grid::{HazardGrid, HazardGridConfig};
pub use two_path::{TwoPath, TwoPathConfig, TwoPathState};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CmdpError {
    #[error("step called on a finished episode; call reset first")]
    EpisodeFinished,
    #[error("action {0:?} is not valid for this environment")]
    InvalidAction(Action),
    #[error("n_steps must be at least 1")]
    EmptyBatch,
    #[error("trajectory has no transitions")]
    EmptyTrajectory,
    #[error("invalid environment config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    /// Box `[-bound, bound]^dim`.
    Continuous { dim: usize, bound: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub cost: f64,
    pub next_state: Vec<f64>,
    /// A terminal state was reached.
    pub done: bool,
    /// The step cap ended the episode without reaching a terminal state.
    pub truncated: bool,
}

impl Transition {
    pub fn ends_episode(&self) -> bool {
        self.done || self.truncated
    }
}

/// `sum_t gamma^t c_t`.
pub fn discounted_sum(costs: &[f64], gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut w = 1.0;
    for c in costs {
        acc += w * c;
        w *= gamma;
    }
    acc
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub discounted_cost_sum: f64,
    pub undiscounted_return: f64,
}

impl Trajectory {
    pub fn new(transitions: Vec<Transition>, gamma: f64) -> Self {
        let costs: Vec<f64> = transitions.iter().map(|t| t.cost).collect();
        Self {
            discounted_cost_sum: discounted_sum(&costs, gamma),
            undiscounted_return: transitions.iter().map(|t| t.reward).sum(),
            transitions,
        }
    }
}

pub fn episode_cost_sum(traj: &Trajectory, gamma: f64) -> Result<f64, CmdpError> {
    if traj.transitions.is_empty() {
        return Err(CmdpError::EmptyTrajectory);
    }
    let costs: Vec<f64> = traj.transitions.iter().map(|t| t.cost).collect();
    Ok(discounted_sum(&costs, gamma))
}

/// Summary of one finished episode inside a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub discounted_cost: f64,
    pub undiscounted_cost: f64,
    pub undiscounted_return: f64,
    pub length: usize,
    pub first_action: Action,
}

impl EpisodeStats {
    pub fn cost_sum(&self, discounted: bool) -> f64 {
        if discounted {
            self.discounted_cost
        } else {
            self.undiscounted_cost
        }
    }
}

/// Flat batch of consecutive transitions plus the episodes finished inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub transitions: Vec<Transition>,
    pub episodes: Vec<EpisodeStats>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

pub trait StochasticPolicy {
    fn sample(&self, obs: &[f64], rng: &mut dyn RngCore) -> Action;
}

/// Always plays the same action.
#[derive(Debug, Clone)]
pub struct FixedPolicy(pub Action);

impl StochasticPolicy for FixedPolicy {
    fn sample(&self, _obs: &[f64], _rng: &mut dyn RngCore) -> Action {
        self.0.clone()
    }
}

/// Uniform over a discrete space or over the continuous box.
#[derive(Debug, Clone)]
pub struct UniformPolicy(pub ActionSpace);

impl StochasticPolicy for UniformPolicy {
    fn sample(&self, _obs: &[f64], rng: &mut dyn RngCore) -> Action {
        match self.0 {
            ActionSpace::Discrete(n) => Action::Discrete(rng.random_range(0..n)),
            ActionSpace::Continuous { dim, bound } => {
                Action::Continuous((0..dim).map(|_| rng.random_range(-bound..bound)).collect())
            }
        }
    }
}

impl<F> StochasticPolicy for F
where
    F: Fn(&[f64], &mut dyn RngCore) -> Action,
{
    fn sample(&self, obs: &[f64], rng: &mut dyn RngCore) -> Action {
        self(obs, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    TwoPath,
    HazardGrid,
}

fn default_max_steps() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub env_id: EnvId,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub two_path: TwoPathConfig,
    #[serde(default)]
    pub hazard_grid: HazardGridConfig,
}

impl EnvConfig {
    pub fn two_path() -> Self {
        Self {
            env_id: EnvId::TwoPath,
            max_steps: default_max_steps(),
            seed: 0,
            two_path: TwoPathConfig::default(),
            hazard_grid: HazardGridConfig::default(),
        }
    }

    pub fn hazard_grid() -> Self {
        Self {
            env_id: EnvId::HazardGrid,
            ..Self::two_path()
        }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    TwoPath(TwoPath),
    HazardGrid(HazardGrid),
}

/// A seeded environment instance. Dynamics are deterministic; only costs are random.
#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    kind: Kind,
    rng: rand_chacha::ChaCha8Rng,
    t: usize,
    finished: bool,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self, CmdpError> {
        use rand::SeedableRng;
        if config.max_steps == 0 {
            return Err(CmdpError::BadConfig("max_steps must be positive".into()));
        }
        let kind = match config.env_id {
            EnvId::TwoPath => Kind::TwoPath(TwoPath::new(config.two_path.clone())?),
            EnvId::HazardGrid => Kind::HazardGrid(HazardGrid::new(config.hazard_grid.clone())?),
        };
        let rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            kind,
            rng,
            t: 0,
            finished: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn obs_dim(&self) -> usize {
        match &self.kind {
            Kind::TwoPath(e) => e.obs_dim(),
            Kind::HazardGrid(e) => e.obs_dim(),
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match &self.kind {
            Kind::TwoPath(e) => e.action_space(),
            Kind::HazardGrid(e) => e.action_space(),
        }
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        use rand::SeedableRng;
        self.rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        self.t = 0;
        self.finished = false;
        match &mut self.kind {
            Kind::TwoPath(e) => e.reset(),
            Kind::HazardGrid(e) => e.reset(),
        }
        self.observation()
    }

    pub fn observation(&self) -> Vec<f64> {
        let frac = self.t as f64 / self.config.max_steps as f64;
        match &self.kind {
            Kind::TwoPath(e) => e.observation(),
            Kind::HazardGrid(e) => e.observation(frac),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn two_path_state(&self) -> Option<TwoPathState> {
        match &self.kind {
            Kind::TwoPath(e) => Some(e.state()),
            Kind::HazardGrid(_) => None,
        }
    }

    pub fn grid_position(&self) -> Option<(usize, usize)> {
        match &self.kind {
            Kind::HazardGrid(e) => Some(e.position()),
            Kind::TwoPath(_) => None,
        }
    }

    pub fn step(&mut self, action: &Action) -> Result<Transition, CmdpError> {
        if self.finished {
            return Err(CmdpError::EpisodeFinished);
        }
        let state = self.observation();
        let (reward, cost, done) = match &mut self.kind {
            Kind::TwoPath(e) => e.step(action, &mut self.rng)?,
            Kind::HazardGrid(e) => e.step(action, &mut self.rng)?,
        };
        debug_assert!(cost >= 0.0);
        self.t += 1;
        let truncated = !done && self.t >= self.config.max_steps;
        self.finished = done || truncated;
        Ok(Transition {
            state,
            action: action.clone(),
            reward,
            cost,
            next_state: self.observation(),
            done,
            truncated,
        })
    }
}

/// Collects exactly `n_steps` transitions, resetting with seeds drawn from
/// `rng` at the start and after every finished episode.
pub fn collect_batch(
    policy: &dyn StochasticPolicy,
    env: &mut Env,
    n_steps: usize,
    gamma: f64,
    rng: &mut dyn RngCore,
) -> Result<TrajectoryBatch, CmdpError> {
    if n_steps == 0 {
        return Err(CmdpError::EmptyBatch);
    }
    let mut transitions = Vec::with_capacity(n_steps);
    let mut episodes = Vec::new();
    let mut obs = env.reset(rng.next_u64());
    let mut ep_start = 0;
    while transitions.len() < n_steps {
        let a = policy.sample(&obs, rng);
        let tr = env.step(&a)?;
        let end = tr.ends_episode();
        obs = tr.next_state.clone();
        transitions.push(tr);
        if end {
            let ep = &transitions[ep_start..];
            let costs: Vec<f64> = ep.iter().map(|t| t.cost).collect();
            episodes.push(EpisodeStats {
                discounted_cost: discounted_sum(&costs, gamma),
                undiscounted_cost: costs.iter().sum(),
                undiscounted_return: ep.iter().map(|t| t.reward).sum(),
                length: ep.len(),
                first_action: ep[0].action.clone(),
            });
            ep_start = transitions.len();
            obs = env.reset(rng.next_u64());
        }
    }
    Ok(TrajectoryBatch {
        transitions,
        episodes,
    })
}

/// Runs `n` complete episodes and returns them as trajectories.
pub fn rollout_episodes(
    policy: &dyn StochasticPolicy,
    env: &mut Env,
    n: usize,
    gamma: f64,
    rng: &mut dyn RngCore,
) -> Result<Vec<Trajectory>, CmdpError> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut obs = env.reset(rng.next_u64());
        let mut trs = Vec::new();
        loop {
            let a = policy.sample(&obs, rng);
            let tr = env.step(&a)?;
            let end = tr.ends_episode();
            obs = tr.next_state.clone();
            trs.push(tr);
            if end {
                break;
            }
        }
        out.push(Trajectory::new(trs, gamma));
    }
    Ok(out)
}

/// Discounted cost sums of `n` episodes; cheaper than [`rollout_episodes`].
pub fn episode_cost_sums(
    policy: &dyn StochasticPolicy,
    env: &mut Env,
    n: usize,
    gamma: f64,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>, CmdpError> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut obs = env.reset(rng.next_u64());
        let (mut acc, mut w) = (0.0, 1.0);
        loop {
            let a = policy.sample(&obs, rng);
            let tr = env.step(&a)?;
            acc += w * tr.cost;
            w *= gamma;
            if tr.ends_episode() {
                break;
            }
            obs = tr.next_state;
        }
        out.push(acc);
    }
    Ok(out)
}
