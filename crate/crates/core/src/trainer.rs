//! The training loop: collect, fit critics and tails, compute advantages,
//! take clipped policy steps, move the multiplier.

use crate::advantage::{
    advantage_record, combined_advantage, log_mu_weight, normalize, reward_advantage, td_error,
    AdvantageError, MuVariant, TransitionView,
};
use crate::cmdp::{
    collect_batch, Action, ActionSpace, CmdpError, Env, EnvConfig, EpisodeStats, StochasticPolicy,
};
use crate::critic::{
    cost_value_loss, crossing_rate, discounted_to_go, quantile_at, quantile_fractions,
    quantile_td_loss, quantile_td_targets, reward_value_loss, HuberConfig,
};
use crate::lagrange::{empirical_quantile, ConstraintStat, LagrangeState};
use crate::nnfa::{
    categorical_kl, categorical_log_probs, gaussian_logprob, kl_diag_gaussian, softmax, Adam,
    AdamConfig, GaussianPolicyOutput, Matrix, Mlp, MlpSpec, NnError, OutputActivation,
    ParamStore, SliceId, Tape, Var,
};
use crate::tail::{tail_fit_loss_tape, WeibullParams};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("non-finite {loss} loss at iteration {iteration}")]
    NonFinite { loss: &'static str, iteration: usize },
    #[error(transparent)]
    Env(#[from] CmdpError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error("metrics sink: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Quantile constraint with mu-weighted quantile advantages.
    #[default]
    Qcpo,
    /// Expected-cost constraint with the quantile mean as cost value.
    Expcp,
    /// Reward only; the multiplier is never used.
    Ppo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub seed: u64,
    pub gamma: f64,
    pub lr: f64,
    /// Learning rate for the value, quantile and tail nets; `lr` when unset.
    pub critic_lr: Option<f64>,
    pub n_q: usize,
    pub tail_k: usize,
    pub kappa: f64,
    pub r_clip: f64,
    pub c_clip: f64,
    pub eta: f64,
    pub eps0: f64,
    pub d_th: f64,
    pub batch_steps: usize,
    pub subtraj_len: usize,
    pub epochs_per_batch: usize,
    /// Gradient steps per epoch; each uses `1 / minibatches` of the sub-trajectories.
    pub minibatches: usize,
    pub max_env_steps: u64,
    pub hidden: Vec<usize>,
    /// Episodes in the multiplier's cost buffer.
    pub lambda_window: usize,
    /// Episodes behind the `*_100ep` metrics.
    pub stats_window: usize,
    /// Discounted or plain episode cost sums for the constraint and its metrics.
    pub discounted_constraint: bool,
    pub normalize_advantages: bool,
    pub entropy_coef: f64,
    pub freeze_lambda: bool,
    pub initial_lambda: f64,
    pub mu_variant: MuVariant,
    pub max_grad_norm: Option<f64>,
    pub init_log_std: f64,
    /// Weight of the quantile-mean regression onto sampled cost-to-go.
    pub cost_value_coef: f64,
    /// Decay every learning rate linearly to zero over `max_env_steps`.
    pub anneal_lr: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Qcpo,
            seed: 0,
            gamma: 0.99,
            lr: 1e-4,
            critic_lr: None,
            n_q: 25,
            tail_k: 8,
            kappa: HuberConfig::default().kappa,
            r_clip: 0.1,
            c_clip: 0.5,
            eta: 0.1,
            eps0: 0.1,
            d_th: 10.0,
            batch_steps: 4000,
            subtraj_len: 100,
            epochs_per_batch: 8,
            minibatches: 1,
            max_env_steps: 2_000_000,
            hidden: vec![64, 64],
            lambda_window: 100,
            stats_window: 100,
            discounted_constraint: true,
            normalize_advantages: true,
            entropy_coef: 0.0,
            freeze_lambda: false,
            initial_lambda: 0.0,
            mu_variant: MuVariant::SuccessorTail,
            max_grad_norm: None,
            init_log_std: -0.5,
            cost_value_coef: 1.0,
            anneal_lr: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.eps0 > 0.0 && self.eps0 < 1.0) {
            return bad("eps0 must lie in (0, 1)");
        }
        if !(self.r_clip > 0.0 && self.c_clip > 0.0 && self.eta > 0.0) {
            return bad("r_clip, c_clip and eta must be positive");
        }
        if !(self.lr > 0.0 && self.kappa > 0.0 && self.critic_lr.is_none_or(|l| l > 0.0)) {
            return bad("learning rates and kappa must be positive");
        }
        if self.n_q == 0 || self.tail_k < 2 || self.tail_k > self.n_q {
            return bad("need n_q >= tail_k >= 2");
        }
        if self.batch_steps == 0 || self.subtraj_len == 0 || self.batch_steps % self.subtraj_len != 0 {
            return bad("batch_steps must be a positive multiple of subtraj_len");
        }
        let n_seg = self.batch_steps / self.subtraj_len;
        if self.minibatches == 0 || self.minibatches > n_seg {
            return bad("minibatches must lie in 1..=batch_steps/subtraj_len");
        }
        if self.lambda_window == 0 || self.stats_window == 0 {
            return bad("windows must be positive");
        }
        if self.initial_lambda < 0.0 || self.entropy_coef < 0.0 || self.cost_value_coef < 0.0 {
            return bad("initial_lambda, entropy_coef and cost_value_coef must be nonnegative");
        }
        Ok(())
    }

    fn constraint_stat(&self) -> ConstraintStat {
        match self.mode {
            Mode::Expcp => ConstraintStat::Mean,
            _ => ConstraintStat::Quantile,
        }
    }
}

/// Actions of a batch, in the layout the policy head needs.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionBatch {
    Discrete(Vec<usize>),
    Continuous(Matrix),
}

impl ActionBatch {
    fn from_actions(actions: &[&Action]) -> Self {
        match actions.first() {
            Some(Action::Continuous(a0)) => {
                let d = a0.len();
                let mut m = Matrix::zeros(actions.len(), d);
                for (r, a) in actions.iter().enumerate() {
                    if let Action::Continuous(v) = a {
                        m.row_mut(r).copy_from_slice(v);
                    }
                }
                ActionBatch::Continuous(m)
            }
            _ => ActionBatch::Discrete(
                actions
                    .iter()
                    .map(|a| match a {
                        Action::Discrete(i) => *i,
                        Action::Continuous(_) => 0,
                    })
                    .collect(),
            ),
        }
    }

    fn select(&self, idx: &[usize]) -> Self {
        match self {
            ActionBatch::Discrete(v) => ActionBatch::Discrete(idx.iter().map(|&i| v[i]).collect()),
            ActionBatch::Continuous(m) => ActionBatch::Continuous(m.select_rows(idx)),
        }
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Categorical policy over logits, or a Gaussian with a state-independent log std.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub mlp: Mlp,
    pub log_std: Option<SliceId>,
    pub store: ParamStore,
}

impl PolicyNet {
    pub const PREFIX: &'static str = "pi";
    pub const LOG_STD: &'static str = "pi.log_std";

    pub fn spec(obs_dim: usize, space: &ActionSpace, hidden: &[usize]) -> MlpSpec {
        let out = match *space {
            ActionSpace::Discrete(n) => n,
            ActionSpace::Continuous { dim, .. } => dim,
        };
        MlpSpec::tanh(obs_dim, hidden, out)
    }

    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        space: &ActionSpace,
        hidden: &[usize],
        init_log_std: f64,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(Self::spec(obs_dim, space, hidden), Self::PREFIX, &mut store, 0.01, rng);
        let log_std = match *space {
            ActionSpace::Continuous { dim, .. } => {
                Some(store.add(Self::LOG_STD, 1, dim, || init_log_std))
            }
            ActionSpace::Discrete(_) => None,
        };
        Self { mlp, log_std, store }
    }

    pub fn attach(
        store: ParamStore,
        obs_dim: usize,
        space: &ActionSpace,
        hidden: &[usize],
    ) -> Result<Self, NnError> {
        let mlp = Mlp::attach(Self::spec(obs_dim, space, hidden), Self::PREFIX, &store)?;
        let log_std = match *space {
            ActionSpace::Continuous { .. } => Some(store.find(Self::LOG_STD).ok_or_else(|| {
                NnError::BadLayout(format!("missing slice `{}`", Self::LOG_STD))
            })?),
            ActionSpace::Discrete(_) => None,
        };
        Ok(Self { mlp, log_std, store })
    }

    pub fn is_discrete(&self) -> bool {
        self.log_std.is_none()
    }

    /// Logits (discrete) or means (continuous) for a batch of observations.
    pub fn head(&self, obs: &Matrix) -> Result<Matrix, NnError> {
        self.mlp.forward_batch(&self.store, obs)
    }

    /// Action probabilities at one observation; discrete heads only.
    pub fn action_probs(&self, obs: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(softmax(&self.mlp.forward(&self.store, obs)?))
    }

    fn gaussian_row(&self, head_row: &[f64]) -> GaussianPolicyOutput {
        let ls = self.store.slice(self.log_std.expect("continuous head"));
        GaussianPolicyOutput {
            mean: head_row.to_vec(),
            log_std: ls.to_vec(),
        }
    }

    /// Log-probabilities of `actions`, one per row of `obs`.
    pub fn log_probs(&self, obs: &Matrix, actions: &ActionBatch) -> Result<Vec<f64>, NnError> {
        let h = self.head(obs)?;
        Ok(match actions {
            ActionBatch::Discrete(a) => (0..h.rows)
                .map(|r| categorical_log_probs(h.row(r))[a[r]])
                .collect(),
            ActionBatch::Continuous(m) => (0..h.rows)
                .map(|r| gaussian_logprob(&self.gaussian_row(h.row(r)), m.row(r)))
                .collect(),
        })
    }

    /// Mean `KL(self || other)` over the rows of `obs`.
    pub fn mean_kl(&self, other: &PolicyNet, obs: &Matrix) -> Result<f64, NnError> {
        let (p, q) = (self.head(obs)?, other.head(obs)?);
        let total: f64 = (0..p.rows)
            .map(|r| {
                if self.is_discrete() {
                    categorical_kl(p.row(r), q.row(r))
                } else {
                    kl_diag_gaussian(&self.gaussian_row(p.row(r)), &other.gaussian_row(q.row(r)))
                }
            })
            .sum();
        Ok(total / p.rows.max(1) as f64)
    }

    /// Taped log-probabilities (`n x 1`) and per-row entropies (`n x 1` or `1 x 1`).
    fn log_probs_tape(&self, tape: &mut Tape, x: Var, actions: &ActionBatch) -> (Var, Var) {
        let h = self.mlp.forward_tape(tape, &self.store, x);
        match actions {
            ActionBatch::Discrete(a) => {
                let lsm = tape.log_softmax(h);
                let lp = tape.gather(lsm, a);
                let p = tape.exp(lsm);
                let plp = tape.mul(p, lsm);
                let s = tape.sum_cols(plp);
                let ent = tape.neg(s);
                (lp, ent)
            }
            ActionBatch::Continuous(m) => {
                let n = m.rows;
                let d = m.cols;
                let ls = tape.param(&self.store, self.log_std.expect("continuous head"));
                let act = tape.constant(m.clone());
                let diff = tape.sub(act, h);
                let ones = tape.constant(Matrix::filled(n, 1, 1.0));
                let nls = tape.neg(ls);
                let inv = tape.exp(nls);
                let inv_b = tape.matmul(ones, inv);
                let z = tape.mul(diff, inv_b);
                let z2 = tape.square(z);
                let s = tape.sum_cols(z2);
                let quad = tape.scale(s, -0.5);
                let ls_sum = tape.sum(ls);
                let ls_b = tape.matmul(ones, ls_sum);
                let lp = tape.sub(quad, ls_b);
                let lp = tape.affine(lp, 1.0, -0.5 * d as f64 * LN_2PI);
                let ent = tape.affine(ls_sum, 1.0, 0.5 * d as f64 * (1.0 + LN_2PI));
                (lp, ent)
            }
        }
    }
}

impl StochasticPolicy for PolicyNet {
    fn sample(&self, obs: &[f64], rng: &mut dyn RngCore) -> Action {
        let h = self
            .mlp
            .forward(&self.store, obs)
            .expect("observation width matches the policy input");
        match self.log_std {
            None => {
                let p = softmax(&h);
                let x: f64 = rng.random();
                let mut acc = 0.0;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if x < acc {
                        return Action::Discrete(i);
                    }
                }
                Action::Discrete(p.len() - 1)
            }
            Some(id) => {
                let ls = self.store.slice(id);
                Action::Continuous(
                    h.iter()
                        .zip(ls)
                        .map(|(m, l)| m + l.exp() * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            }
        }
    }
}

/// `-mean(min(clip(ratio) * A, ratio * A))` on the tape.
pub fn ppo_policy_loss(
    tape: &mut Tape,
    logp_new: Var,
    logp_old: &[f64],
    advantages: &[f64],
    r_clip: f64,
) -> Var {
    let old = tape.constant(Matrix::column(logp_old.to_vec()));
    let d = tape.sub(logp_new, old);
    let ratio = tape.exp(d);
    let a = tape.constant(Matrix::column(advantages.to_vec()));
    let plain = tape.mul(ratio, a);
    let clipped_ratio = tape.clamp(ratio, 1.0 - r_clip, 1.0 + r_clip);
    let clipped = tape.mul(clipped_ratio, a);
    let m = tape.min(clipped, plain);
    let mean = tape.mean(m);
    tape.neg(mean)
}

/// One clipped-surrogate term, `min(clip(ratio) * A, ratio * A)`.
pub fn ppo_term(ratio: f64, advantage: f64, r_clip: f64) -> f64 {
    (ratio.clamp(1.0 - r_clip, 1.0 + r_clip) * advantage).min(ratio * advantage)
}

/// Value, quantile and tail networks with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Critics {
    pub value: Mlp,
    pub value_store: ParamStore,
    pub quantile: Mlp,
    pub quantile_store: ParamStore,
    pub tail: Mlp,
    pub tail_store: ParamStore,
}

impl Critics {
    pub fn specs(obs_dim: usize, hidden: &[usize], n_q: usize) -> [MlpSpec; 3] {
        [
            MlpSpec::tanh(obs_dim, hidden, 1),
            MlpSpec::tanh(obs_dim, hidden, n_q).with_output(OutputActivation::Exp),
            MlpSpec::tanh(obs_dim, hidden, 2),
        ]
    }

    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], n_q: usize, rng: &mut R) -> Self {
        let [vs, qs, ts] = Self::specs(obs_dim, hidden, n_q);
        let mut value_store = ParamStore::new();
        let value = Mlp::new(vs, "v", &mut value_store, 1.0, rng);
        let mut quantile_store = ParamStore::new();
        let quantile = Mlp::new(qs, "q", &mut quantile_store, 0.1, rng);
        let mut tail_store = ParamStore::new();
        let tail = Mlp::new(ts, "tail", &mut tail_store, 0.1, rng);
        Self {
            value,
            value_store,
            quantile,
            quantile_store,
            tail,
            tail_store,
        }
    }

    pub fn attach(
        stores: [ParamStore; 3],
        obs_dim: usize,
        hidden: &[usize],
        n_q: usize,
    ) -> Result<Self, NnError> {
        let [vs, qs, ts] = Self::specs(obs_dim, hidden, n_q);
        let [value_store, quantile_store, tail_store] = stores;
        Ok(Self {
            value: Mlp::attach(vs, "v", &value_store)?,
            quantile: Mlp::attach(qs, "q", &quantile_store)?,
            tail: Mlp::attach(ts, "tail", &tail_store)?,
            value_store,
            quantile_store,
            tail_store,
        })
    }

    pub fn values(&self, obs: &Matrix) -> Result<Vec<f64>, NnError> {
        Ok(self.value.forward_batch(&self.value_store, obs)?.data)
    }

    pub fn quantiles(&self, obs: &Matrix) -> Result<Matrix, NnError> {
        self.quantile.forward_batch(&self.quantile_store, obs)
    }

    pub fn tails(&self, obs: &Matrix) -> Result<Vec<WeibullParams>, NnError> {
        let raw = self.tail.forward_batch(&self.tail_store, obs)?;
        Ok((0..raw.rows)
            .map(|r| WeibullParams::from_raw(raw.get(r, 0), raw.get(r, 1)))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: usize,
    pub env_steps: u64,
    pub avg_return_100ep: f64,
    pub outage_prob_100ep: f64,
    pub avg_cost_sum_100ep: f64,
    pub lambda: f64,
    pub emp_quantile: f64,
    pub policy_loss: f64,
    pub quantile_loss: f64,
    pub value_loss: f64,
    pub tail_loss: f64,
    pub mean_kl: f64,
    pub qx_rate: f64,
    /// Mean `|ln mu|` gap between the successor-tail and state-tail denominators.
    pub mu_variant_gap: f64,
    /// Share of this batch's finished episodes whose first action was index 1.
    pub first_action_1_rate: f64,
}

impl IterationMetrics {
    pub const CSV_HEADER: &'static str = "iter,env_steps,avg_return_100ep,outage_prob_100ep,avg_cost_sum_100ep,lambda,emp_quantile,policy_loss,quantile_loss,value_loss,tail_loss,mean_kl,qx_rate";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.env_steps,
            self.avg_return_100ep,
            self.outage_prob_100ep,
            self.avg_cost_sum_100ep,
            self.lambda,
            self.emp_quantile,
            self.policy_loss,
            self.quantile_loss,
            self.value_loss,
            self.tail_loss,
            self.mean_kl,
            self.qx_rate
        )
    }
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

fn adam(cfg: &TrainerConfig, lr: f64, n: usize) -> Adam {
    Adam::new(
        AdamConfig {
            lr,
            max_grad_norm: cfg.max_grad_norm,
            ..AdamConfig::default()
        },
        n,
    )
}

pub struct Trainer {
    pub config: TrainerConfig,
    pub env_config: EnvConfig,
    env: Env,
    pub policy: PolicyNet,
    pub critics: Critics,
    opt_policy: Adam,
    opt_value: Adam,
    opt_quantile: Adam,
    opt_tail: Adam,
    pub lagrange: LagrangeState,
    rollout_rng: ChaCha8Rng,
    critic_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    fractions: Vec<f64>,
    recent: VecDeque<EpisodeStats>,
    pub iteration: usize,
    pub env_steps: u64,
}

struct Batch {
    obs: Matrix,
    next_obs: Matrix,
    actions: ActionBatch,
    rewards: Vec<f64>,
    costs: Vec<f64>,
    ends: Vec<bool>,
}

impl Trainer {
    pub fn new(env_config: EnvConfig, config: TrainerConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let env = Env::new(env_config.clone())?;
        let mut init = stream(config.seed, 0);
        let policy = PolicyNet::new(
            env.obs_dim(),
            &env.action_space(),
            &config.hidden,
            config.init_log_std,
            &mut init,
        );
        let critics = Critics::new(env.obs_dim(), &config.hidden, config.n_q, &mut init);
        Self::assemble(env_config, config, env, policy, critics)
    }

    pub(crate) fn assemble(
        env_config: EnvConfig,
        config: TrainerConfig,
        env: Env,
        policy: PolicyNet,
        critics: Critics,
    ) -> Result<Self, TrainError> {
        let mut lagrange = LagrangeState::new(
            config.eta,
            config.d_th,
            config.eps0,
            config.lambda_window,
            config.constraint_stat(),
        );
        lagrange.lambda = config.initial_lambda;
        let critic_lr = config.critic_lr.unwrap_or(config.lr);
        Ok(Self {
            opt_policy: adam(&config, config.lr, policy.store.len()),
            opt_value: adam(&config, critic_lr, critics.value_store.len()),
            opt_quantile: adam(&config, critic_lr, critics.quantile_store.len()),
            opt_tail: adam(&config, critic_lr, critics.tail_store.len()),
            rollout_rng: stream(config.seed, 1),
            critic_rng: stream(config.seed, 2),
            policy_rng: stream(config.seed, 3),
            fractions: quantile_fractions(config.n_q).map_err(|e| TrainError::Config(e.to_string()))?,
            recent: VecDeque::with_capacity(config.stats_window),
            iteration: 0,
            env_steps: 0,
            lagrange,
            policy,
            critics,
            env,
            env_config,
            config,
        })
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    fn collect(&mut self) -> Result<(Batch, Vec<EpisodeStats>), TrainError> {
        let b = collect_batch(
            &self.policy,
            &mut self.env,
            self.config.batch_steps,
            self.config.gamma,
            &mut self.rollout_rng,
        )?;
        let n = b.transitions.len();
        let d = self.env.obs_dim();
        let mut obs = Matrix::zeros(n, d);
        let mut next_obs = Matrix::zeros(n, d);
        for (r, t) in b.transitions.iter().enumerate() {
            obs.row_mut(r).copy_from_slice(&t.state);
            next_obs.row_mut(r).copy_from_slice(&t.next_state);
        }
        let actions: Vec<&Action> = b.transitions.iter().map(|t| &t.action).collect();
        let batch = Batch {
            obs,
            next_obs,
            actions: ActionBatch::from_actions(&actions),
            rewards: b.transitions.iter().map(|t| t.reward).collect(),
            costs: b.transitions.iter().map(|t| t.cost).collect(),
            ends: b.transitions.iter().map(|t| t.ends_episode()).collect(),
        };
        Ok((batch, b.episodes))
    }

    /// Segment-wise discounted targets with a bootstrap at cut points.
    fn to_go(&self, values: &[f64], ends: &[bool], boot: &[f64]) -> Vec<f64> {
        let l = self.config.subtraj_len;
        let mut out = Vec::with_capacity(values.len());
        for s in (0..values.len()).step_by(l) {
            let e = (s + l).min(values.len());
            out.extend(discounted_to_go(&values[s..e], &ends[s..e], boot[e - 1], self.config.gamma));
        }
        out
    }

    fn minibatch_rows(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let l = self.config.subtraj_len;
        let n_seg = self.config.batch_steps / l;
        let mut segs: Vec<usize> = (0..n_seg).collect();
        segs.shuffle(rng);
        let m = self.config.minibatches;
        (0..m)
            .map(|k| {
                let lo = k * n_seg / m;
                let hi = (k + 1) * n_seg / m;
                segs[lo..hi].iter().flat_map(|&s| s * l..(s + 1) * l).collect()
            })
            .collect()
    }

    fn step_or_fail(
        &self,
        loss: &'static str,
        value: f64,
    ) -> Result<(), TrainError> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(TrainError::NonFinite {
                loss,
                iteration: self.iteration,
            })
        }
    }

    /// Runs one collect / fit / update cycle.
    pub fn train_iteration(&mut self) -> Result<IterationMetrics, TrainError> {
        let cfg = self.config.clone();
        let g = cfg.gamma;
        if cfg.anneal_lr {
            let frac = 1.0 - (self.env_steps as f64 / cfg.max_env_steps.max(1) as f64).min(1.0);
            let critic_lr = cfg.critic_lr.unwrap_or(cfg.lr);
            self.opt_policy.config.lr = cfg.lr * frac;
            for opt in [&mut self.opt_value, &mut self.opt_quantile, &mut self.opt_tail] {
                opt.config.lr = critic_lr * frac;
            }
        }
        let (batch, episodes) = self.collect()?;
        let n = batch.rewards.len();
        self.env_steps += n as u64;
        for ep in &episodes {
            self.lagrange.push(ep.cost_sum(cfg.discounted_constraint));
            if self.recent.len() == cfg.stats_window {
                self.recent.pop_front();
            }
            self.recent.push_back(ep.clone());
        }

        // targets from the critics as they were when the batch was collected
        let v_next_old = self.critics.values(&batch.next_obs)?;
        let q_next_old = self.critics.quantiles(&batch.next_obs)?;
        let c_next_old: Vec<f64> = (0..n)
            .map(|r| q_next_old.row(r).iter().sum::<f64>() / cfg.n_q as f64)
            .collect();
        let returns = self.to_go(&batch.rewards, &batch.ends, &v_next_old);
        let cost_to_go = self.to_go(&batch.costs, &batch.ends, &c_next_old);
        let td_targets = quantile_td_targets(&batch.costs, &q_next_old, &batch.ends, g);
        let huber = HuberConfig { kappa: cfg.kappa };
        let top_u: Vec<f64> = self.fractions[cfg.n_q - cfg.tail_k..].to_vec();
        let top_cols: Vec<usize> = (cfg.n_q - cfg.tail_k..cfg.n_q).collect();

        let (mut v_sum, mut q_sum, mut t_sum, mut n_crit) = (0.0, 0.0, 0.0, 0usize);
        let mut critic_rng = self.critic_rng.clone();
        for _ in 0..cfg.epochs_per_batch {
            for rows in self.minibatch_rows(&mut critic_rng) {
                let x = batch.obs.select_rows(&rows);
                let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<f64>>();

                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let v = self.critics.value.forward_tape(&mut tape, &self.critics.value_store, xv);
                let l = reward_value_loss(&mut tape, v, &pick(&returns));
                let lv = tape.scalar(l);
                self.step_or_fail("value", lv)?;
                let grad = tape.backward(l)?.wrt(&self.critics.value_store);
                self.opt_value.step(&mut self.critics.value_store, &grad).map_err(|_| {
                    TrainError::NonFinite { loss: "value", iteration: self.iteration }
                })?;

                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let q = self
                    .critics
                    .quantile
                    .forward_tape(&mut tape, &self.critics.quantile_store, xv);
                let lq = quantile_td_loss(&mut tape, q, td_targets.select_rows(&rows), &self.fractions, huber);
                let l = if cfg.cost_value_coef > 0.0 {
                    let lc = cost_value_loss(&mut tape, q, &pick(&cost_to_go));
                    let lc = tape.scale(lc, cfg.cost_value_coef);
                    tape.add(lc, lq)
                } else {
                    lq
                };
                let lqv = tape.scalar(l);
                self.step_or_fail("quantile", lqv)?;
                let grad = tape.backward(l)?.wrt(&self.critics.quantile_store);
                self.opt_quantile
                    .step(&mut self.critics.quantile_store, &grad)
                    .map_err(|_| TrainError::NonFinite { loss: "quantile", iteration: self.iteration })?;

                let top_q = {
                    let q = self.critics.quantiles(&x)?;
                    let mut m = Matrix::zeros(q.rows, cfg.tail_k);
                    for r in 0..q.rows {
                        for (j, &c) in top_cols.iter().enumerate() {
                            m.set(r, j, q.get(r, c));
                        }
                    }
                    m
                };
                let mut tape = Tape::new();
                let xv = tape.constant(x);
                let raw = self.critics.tail.forward_tape(&mut tape, &self.critics.tail_store, xv);
                let l = tail_fit_loss_tape(&mut tape, raw, &top_q, &top_u);
                let ltv = tape.scalar(l);
                self.step_or_fail("tail", ltv)?;
                let grad = tape.backward(l)?.wrt(&self.critics.tail_store);
                self.opt_tail
                    .step(&mut self.critics.tail_store, &grad)
                    .map_err(|_| TrainError::NonFinite { loss: "tail", iteration: self.iteration })?;

                v_sum += lv;
                q_sum += lqv;
                t_sum += ltv;
                n_crit += 1;
            }
        }
        self.critic_rng = critic_rng;

        // advantages from the freshly fitted, now frozen critics
        let v_s = self.critics.values(&batch.obs)?;
        let v_n = self.critics.values(&batch.next_obs)?;
        let q_s = self.critics.quantiles(&batch.obs)?;
        let q_n = self.critics.quantiles(&batch.next_obs)?;
        let qx_rate = crossing_rate(&q_s);
        let lambda = match cfg.mode {
            Mode::Ppo => 0.0,
            _ => self.lagrange.lambda,
        };
        let u = 1.0 - cfg.eps0;
        let mut adv = Vec::with_capacity(n);
        let mut gap_sum = 0.0;
        match cfg.mode {
            Mode::Qcpo => {
                let t_s = self.critics.tails(&batch.obs)?;
                let t_n = self.critics.tails(&batch.next_obs)?;
                for r in 0..n {
                    let view = TransitionView {
                        reward: batch.rewards[r],
                        cost: batch.costs[r],
                        terminal: batch.ends[r],
                        v_s: v_s[r],
                        v_next: v_n[r],
                        q_s: quantile_at(q_s.row(r), &self.fractions, u),
                        q_next: quantile_at(q_n.row(r), &self.fractions, u),
                        tail_s: t_s[r],
                        tail_next: t_n[r],
                    };
                    let rec = advantage_record(&view, lambda, g, cfg.c_clip, cfg.mu_variant)?;
                    adv.push(rec.combined_adv);
                    if !view.terminal {
                        let a = log_mu_weight(view.cost, view.q_s, view.tail_next, view.tail_s, g, MuVariant::SuccessorTail);
                        let b = log_mu_weight(view.cost, view.q_s, view.tail_next, view.tail_s, g, MuVariant::StateTail);
                        gap_sum += (a - b).abs();
                    }
                }
            }
            Mode::Expcp | Mode::Ppo => {
                for r in 0..n {
                    let ra = reward_advantage(batch.rewards[r], v_s[r], v_n[r], g, batch.ends[r]);
                    let c_s = q_s.row(r).iter().sum::<f64>() / cfg.n_q as f64;
                    let c_n = q_n.row(r).iter().sum::<f64>() / cfg.n_q as f64;
                    let ca = td_error(batch.costs[r], c_s, c_n, g, batch.ends[r]);
                    adv.push(combined_advantage(ra, ca, lambda));
                }
            }
        }
        if cfg.normalize_advantages {
            normalize(&mut adv);
        }

        let old_policy = self.policy.clone();
        let logp_old = old_policy.log_probs(&batch.obs, &batch.actions)?;
        let (mut p_sum, mut n_pol) = (0.0, 0usize);
        let mut policy_rng = self.policy_rng.clone();
        for _ in 0..cfg.epochs_per_batch {
            for rows in self.minibatch_rows(&mut policy_rng) {
                let x = batch.obs.select_rows(&rows);
                let acts = batch.actions.select(&rows);
                let lp_old: Vec<f64> = rows.iter().map(|&i| logp_old[i]).collect();
                let a: Vec<f64> = rows.iter().map(|&i| adv[i]).collect();
                let mut tape = Tape::new();
                let xv = tape.constant(x);
                let (lp, ent) = self.policy.log_probs_tape(&mut tape, xv, &acts);
                let mut l = ppo_policy_loss(&mut tape, lp, &lp_old, &a, cfg.r_clip);
                if cfg.entropy_coef > 0.0 {
                    let e = tape.mean(ent);
                    let e = tape.scale(e, -cfg.entropy_coef);
                    l = tape.add(l, e);
                }
                let lpv = tape.scalar(l);
                self.step_or_fail("policy", lpv)?;
                let grad = tape.backward(l)?.wrt(&self.policy.store);
                self.opt_policy
                    .step(&mut self.policy.store, &grad)
                    .map_err(|_| TrainError::NonFinite { loss: "policy", iteration: self.iteration })?;
                p_sum += lpv;
                n_pol += 1;
            }
        }
        self.policy_rng = policy_rng;
        let mean_kl = old_policy.mean_kl(&self.policy, &batch.obs)?;

        if cfg.mode != Mode::Ppo && !cfg.freeze_lambda {
            self.lagrange.update();
        }

        let costs: Vec<f64> = self
            .recent
            .iter()
            .map(|e| e.cost_sum(cfg.discounted_constraint))
            .collect();
        let k = costs.len().max(1) as f64;
        let non_terminal = batch.ends.iter().filter(|&&e| !e).count().max(1) as f64;
        let metrics = IterationMetrics {
            iter: self.iteration,
            env_steps: self.env_steps,
            avg_return_100ep: self.recent.iter().map(|e| e.undiscounted_return).sum::<f64>() / k,
            outage_prob_100ep: costs.iter().filter(|&&c| c > cfg.d_th).count() as f64 / k,
            avg_cost_sum_100ep: costs.iter().sum::<f64>() / k,
            lambda: match cfg.mode {
                Mode::Ppo => 0.0,
                _ => self.lagrange.lambda,
            },
            emp_quantile: empirical_quantile(&costs, u).unwrap_or(0.0),
            policy_loss: p_sum / n_pol.max(1) as f64,
            quantile_loss: q_sum / n_crit.max(1) as f64,
            value_loss: v_sum / n_crit.max(1) as f64,
            tail_loss: t_sum / n_crit.max(1) as f64,
            mean_kl,
            qx_rate,
            mu_variant_gap: gap_sum / non_terminal,
            first_action_1_rate: if episodes.is_empty() {
                0.0
            } else {
                episodes
                    .iter()
                    .filter(|e| e.first_action == Action::Discrete(1))
                    .count() as f64
                    / episodes.len() as f64
            },
        };
        self.iteration += 1;
        Ok(metrics)
    }

    /// Trains until `max_env_steps` or until `stop` is raised, handing every
    /// row to `sink` as it is produced.
    pub fn run(
        &mut self,
        stop: Option<&AtomicBool>,
        mut sink: impl FnMut(&IterationMetrics) -> std::io::Result<()>,
    ) -> Result<Vec<IterationMetrics>, TrainError> {
        let mut history = Vec::new();
        while self.env_steps < self.config.max_env_steps {
            if stop.is_some_and(|s| s.load(Ordering::SeqCst)) {
                break;
            }
            let m = self.train_iteration()?;
            sink(&m)?;
            history.push(m);
        }
        Ok(history)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_episodes: usize,
    pub gamma: f64,
    pub d_th: f64,
    pub u: f64,
    pub avg_return: f64,
    pub avg_cost: f64,
    pub outage: f64,
    pub quantile: f64,
    pub episode_costs: Vec<f64>,
}

/// Frozen-policy evaluation from fresh resets.
pub fn evaluate(
    policy: &PolicyNet,
    env_config: &EnvConfig,
    n_episodes: usize,
    d_th: f64,
    eps0: f64,
    gamma: f64,
    seed: u64,
) -> Result<EvalSummary, TrainError> {
    if n_episodes == 0 {
        return Err(TrainError::Config("evaluation needs at least one episode".into()));
    }
    if !(eps0 > 0.0 && eps0 < 1.0) {
        return Err(TrainError::Config("eps0 must lie in (0, 1)".into()));
    }
    let mut env = Env::new(env_config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = crate::cmdp::rollout_episodes(policy, &mut env, n_episodes, gamma, &mut rng)?;
    let mut costs = Vec::with_capacity(n_episodes);
    let mut ret = 0.0;
    for t in &eps {
        costs.push(crate::cmdp::episode_cost_sum(t, gamma)?);
        ret += t.transitions.iter().map(|x| x.reward).sum::<f64>();
    }
    let nf = n_episodes as f64;
    Ok(EvalSummary {
        n_episodes,
        gamma,
        d_th,
        u: 1.0 - eps0,
        avg_return: ret / nf,
        avg_cost: costs.iter().sum::<f64>() / nf,
        outage: costs.iter().filter(|&&c| c > d_th).count() as f64 / nf,
        quantile: empirical_quantile(&costs, 1.0 - eps0).unwrap_or(0.0),
        episode_costs: costs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: Mode) -> TrainerConfig {
        TrainerConfig {
            mode,
            batch_steps: 220,
            subtraj_len: 22,
            epochs_per_batch: 2,
            minibatches: 2,
            hidden: vec![8],
            n_q: 9,
            tail_k: 3,
            lr: 1e-3,
            lambda_window: 10,
            stats_window: 20,
            max_env_steps: 660,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn clipped_surrogate_terms() {
        assert_eq!(ppo_term(1.3, 2.0, 0.1), 1.1 * 2.0);
        assert_eq!(ppo_term(0.8, -1.0, 0.1), 0.9 * -1.0);
        assert_eq!(ppo_term(1.0, 0.7, 0.1), 0.7);
    }

    #[test]
    fn ratio_one_loss_is_negative_mean_advantage() {
        let mut t = Tape::new();
        let lp = t.constant(Matrix::column(vec![-0.3, -1.2, -0.1]));
        let a = [1.0, -2.0, 0.5];
        let l = ppo_policy_loss(&mut t, lp, &[-0.3, -1.2, -0.1], &a, 0.1);
        assert!((t.scalar(l) - 0.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ratio_one_gradient_is_vanilla_policy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pol = PolicyNet::new(3, &ActionSpace::Discrete(3), &[5], 0.0, &mut rng);
        let x = Matrix::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let acts = ActionBatch::Discrete(vec![0, 2, 1, 2]);
        let adv = [0.5, -1.0, 2.0, 0.3];
        let old = pol.log_probs(&x, &acts).unwrap();

        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let (lp, _) = pol.log_probs_tape(&mut t, xv, &acts);
        let l = ppo_policy_loss(&mut t, lp, &old, &adv, 0.1);
        let g1 = t.backward(l).unwrap().wrt(&pol.store);

        let mut t = Tape::new();
        let xv = t.constant(x);
        let (lp, _) = pol.log_probs_tape(&mut t, xv, &acts);
        let a = t.constant(Matrix::column(adv.to_vec()));
        let w = t.mul(lp, a);
        let m = t.mean(w);
        let l = t.neg(m);
        let g2 = t.backward(l).unwrap().wrt(&pol.store);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn taped_gaussian_log_probs_match_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let space = ActionSpace::Continuous { dim: 2, bound: 1.0 };
        let mut pol = PolicyNet::new(3, &space, &[4], -0.3, &mut rng);
        let id = pol.log_std.unwrap();
        pol.store.slice_mut(id).copy_from_slice(&[0.2, -0.7]);
        let x = Matrix::from_vec(3, 3, (0..9).map(|i| (i as f64).cos()).collect());
        let acts = ActionBatch::Continuous(Matrix::from_vec(3, 2, vec![0.1, -0.3, 1.0, 0.2, -0.5, 0.0]));
        let plain = pol.log_probs(&x, &acts).unwrap();
        let mut t = Tape::new();
        let xv = t.constant(x);
        let (lp, ent) = pol.log_probs_tape(&mut t, xv, &acts);
        for (a, b) in t.value(lp).data.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
        let expected = 0.2 - 0.7 + (1.0 + LN_2PI);
        assert!((t.scalar(ent) - expected).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainerConfig::default().validate().is_ok());
        let bad = [
            TrainerConfig { gamma: 1.0, ..Default::default() },
            TrainerConfig { eps0: 0.0, ..Default::default() },
            TrainerConfig { r_clip: 0.0, ..Default::default() },
            TrainerConfig { batch_steps: 4050, ..Default::default() },
            TrainerConfig { tail_k: 30, ..Default::default() },
            TrainerConfig { minibatches: 0, ..Default::default() },
            TrainerConfig { cost_value_coef: -1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(TrainError::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<TrainerConfig>(r#"{"gamma": 0.9, "gama": 1}"#);
        assert!(err.is_err());
        let ok: TrainerConfig = serde_json::from_str(r#"{"eps0": 0.2, "mode": "expcp"}"#).unwrap();
        assert_eq!(ok.eps0, 0.2);
        assert_eq!(ok.mode, Mode::Expcp);
        assert_eq!(ok.n_q, 25);
    }

    #[test]
    fn iteration_is_reproducible_and_finite() {
        let run = || {
            let mut t = Trainer::new(EnvConfig::two_path(), tiny(Mode::Qcpo)).unwrap();
            let m = t.train_iteration().unwrap();
            (m.csv_row(), t.policy.store.values().to_vec())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        for field in a.split(',') {
            assert!(field.parse::<f64>().unwrap().is_finite(), "{a}");
        }
        assert_eq!(a.split(',').count(), IterationMetrics::CSV_HEADER.split(',').count());
    }

    #[test]
    fn frozen_zero_lambda_matches_plain_ppo_bitwise() {
        for mode in [Mode::Qcpo, Mode::Expcp] {
            let mut c = tiny(mode);
            c.freeze_lambda = true;
            let mut a = Trainer::new(EnvConfig::two_path(), c).unwrap();
            let mut b = Trainer::new(EnvConfig::two_path(), tiny(Mode::Ppo)).unwrap();
            let ha = a.run(None, |_| Ok(())).unwrap();
            let hb = b.run(None, |_| Ok(())).unwrap();
            assert_eq!(a.policy.store.values(), b.policy.store.values());
            let rows = |h: &[IterationMetrics]| h.iter().map(|m| m.csv_row()).collect::<Vec<_>>();
            assert_eq!(rows(&ha), rows(&hb));
        }
    }

    #[test]
    fn run_respects_budget_and_seed() {
        let mut c = tiny(Mode::Qcpo);
        c.max_env_steps = 0;
        let mut t = Trainer::new(EnvConfig::two_path(), c).unwrap();
        assert!(t.run(None, |_| Ok(())).unwrap().is_empty());

        let mut a = Trainer::new(EnvConfig::two_path(), tiny(Mode::Qcpo)).unwrap();
        let mut c = tiny(Mode::Qcpo);
        c.seed = 1;
        let mut b = Trainer::new(EnvConfig::two_path(), c).unwrap();
        let ha = a.run(None, |_| Ok(())).unwrap();
        let hb = b.run(None, |_| Ok(())).unwrap();
        assert_eq!(ha.len(), 3);
        assert_ne!(ha, hb);
    }

    #[test]
    fn clipped_updates_keep_kl_small() {
        let mut c = tiny(Mode::Qcpo);
        c.epochs_per_batch = 8;
        c.max_env_steps = 2200;
        let mut t = Trainer::new(EnvConfig::two_path(), c).unwrap();
        for m in t.run(None, |_| Ok(())).unwrap() {
            assert!(m.mean_kl < 0.1, "{}", m.mean_kl);
        }
    }

    #[test]
    fn annealing_scales_learning_rates_by_remaining_budget() {
        let mut c = tiny(Mode::Qcpo);
        c.anneal_lr = true;
        c.critic_lr = Some(2e-3);
        let mut t = Trainer::new(EnvConfig::two_path(), c).unwrap();
        let h = t.run(None, |_| Ok(())).unwrap();
        assert_eq!(h.len(), 3);
        // the last iteration started with 440 of 660 steps spent
        assert!((t.opt_policy.config.lr - 1e-3 / 3.0).abs() < 1e-15);
        assert!((t.opt_quantile.config.lr - 2e-3 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn stop_flag_halts_before_the_next_iteration() {
        let stop = AtomicBool::new(false);
        let mut t = Trainer::new(EnvConfig::two_path(), tiny(Mode::Qcpo)).unwrap();
        let h = t
            .run(Some(&stop), |_| {
                stop.store(true, Ordering::SeqCst);
                Ok(())
            })
            .unwrap();
        assert_eq!(h.len(), 1);
    }

    #[test]
    fn continuous_hazard_grid_iteration_runs() {
        let mut env = EnvConfig::hazard_grid();
        env.hazard_grid.continuous_actions = true;
        let mut c = tiny(Mode::Qcpo);
        c.batch_steps = 200;
        c.subtraj_len = 100;
        c.minibatches = 1;
        let mut t = Trainer::new(env, c).unwrap();
        let m = t.train_iteration().unwrap();
        assert!(m.mean_kl.is_finite() && m.mean_kl >= 0.0);
    }

    #[test]
    fn evaluation_of_a_path_two_policy() {
        let env = EnvConfig::two_path();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pol = PolicyNet::new(4, &ActionSpace::Discrete(2), &[4], 0.0, &mut rng);
        let last_w = pol.store.find("pi.w1").unwrap();
        pol.store.slice_mut(last_w).fill(0.0);
        let last_b = pol.store.find("pi.b1").unwrap();
        pol.store.slice_mut(last_b).copy_from_slice(&[-50.0, 50.0]);
        let s = evaluate(&pol, &env, 200, 10.0, 0.1, 1.0, 3).unwrap();
        assert_eq!(s.outage, 0.0);
        assert!((s.avg_cost - 9.0).abs() < 1e-9);
        assert_eq!(s, evaluate(&pol, &env, 200, 10.0, 0.1, 1.0, 3).unwrap());
        assert!(evaluate(&pol, &env, 0, 10.0, 0.1, 1.0, 3).is_err());
    }
}
