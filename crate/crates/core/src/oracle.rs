//! Brute-force and Monte-Carlo oracles for the numerically checkable identities.

use crate::advantage::{raw_mu_target, smooth_log_mu, MuVariant};
use crate::cmdp::{
    episode_cost_sums, CmdpError, Env, EnvConfig, StochasticPolicy, TwoPathConfig, UniformPolicy,
};
use crate::critic::quantile_fractions;
use crate::lagrange::empirical_quantile;
use crate::nnfa::{Matrix, Mlp, MlpSpec, OutputActivation, ParamStore, Tape};
use crate::tail::{fit_weibull, weibull_quantile, WeibullParams};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("need at least {min} rollouts, got {got}")]
    TooFewRollouts { min: usize, got: usize },
    #[error("empty sample")]
    EmptySample,
    #[error("no analytic cost distribution: {0}")]
    NoAnalyticDistribution(String),
    #[error(transparent)]
    Env(#[from] CmdpError),
}

pub const MIN_ROLLOUTS: usize = 100;

/// Empirical `u`-quantile of episode cost sums from the start state.
pub fn mc_quantile(
    policy: &dyn StochasticPolicy,
    env: &mut Env,
    u: f64,
    n_rollouts: usize,
    gamma: f64,
    rng: &mut dyn RngCore,
) -> Result<f64, OracleError> {
    if n_rollouts < MIN_ROLLOUTS {
        return Err(OracleError::TooFewRollouts {
            min: MIN_ROLLOUTS,
            got: n_rollouts,
        });
    }
    let costs = episode_cost_sums(policy, env, n_rollouts, gamma, rng)?;
    empirical_quantile(&costs, u).map_err(|_| OracleError::EmptySample)
}

/// Fraction of episodes whose cost sum exceeds `d_th`.
pub fn mc_outage(
    policy: &dyn StochasticPolicy,
    env: &mut Env,
    d_th: f64,
    n_rollouts: usize,
    gamma: f64,
    rng: &mut dyn RngCore,
) -> Result<f64, OracleError> {
    if n_rollouts == 0 {
        return Err(OracleError::TooFewRollouts { min: 1, got: 0 });
    }
    let costs = episode_cost_sums(policy, env, n_rollouts, gamma, rng)?;
    Ok(outage_fraction(&costs, d_th))
}

pub fn outage_fraction(costs: &[f64], d_th: f64) -> f64 {
    costs.iter().filter(|&&c| c > d_th).count() as f64 / costs.len().max(1) as f64
}

pub fn pinball_loss(samples: &[f64], u: f64, q: f64) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|&x| {
            let d = x - q;
            if d >= 0.0 {
                u * d
            } else {
                (u - 1.0) * d
            }
        })
        .sum();
    total / samples.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinballMin {
    pub argmin: f64,
    pub loss: f64,
}

/// Grid search of the mean pinball loss over `[min, max]` of the samples
/// with spacing `resolution`. Ties go to the smallest grid point.
pub fn pinball_bruteforce_min(
    samples: &[f64],
    u: f64,
    resolution: f64,
) -> Result<PinballMin, OracleError> {
    if samples.is_empty() {
        return Err(OracleError::EmptySample);
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = ((hi - lo) / resolution).round() as usize;
    let mut best = PinballMin {
        argmin: lo,
        loss: pinball_loss(samples, u, lo),
    };
    for i in 1..=n {
        let q = lo + i as f64 * resolution;
        let l = pinball_loss(samples, u, q);
        if l < best.loss - 1e-12 {
            best = PinballMin { argmin: q, loss: l };
        }
    }
    Ok(best)
}

/// One stochastic outcome of an action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub prob: f64,
    pub cost: f64,
    pub reward: f64,
    /// `None` is the absorbing terminal state.
    pub next: Option<usize>,
}

/// Finite acyclic MDP: `outcomes[state][action]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub gamma: f64,
    pub outcomes: Vec<Vec<Vec<Outcome>>>,
}

/// `probs[state][action]`.
pub type TabularPolicy = Vec<Vec<f64>>;

/// Sorted `(value, probability)` atoms.
pub type Pmf = Vec<(f64, f64)>;

fn merge_atoms(mut atoms: Vec<(f64, f64)>) -> Pmf {
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Pmf = Vec::with_capacity(atoms.len());
    for (v, p) in atoms {
        if p <= 0.0 {
            continue;
        }
        match out.last_mut() {
            Some(last) if (last.0 - v).abs() <= 1e-9 * (1.0 + v.abs()) => last.1 += p,
            _ => out.push((v, p)),
        }
    }
    out
}

pub fn pmf_quantile(pmf: &Pmf, u: f64) -> f64 {
    let mut acc = 0.0;
    for &(v, p) in pmf {
        acc += p;
        if acc >= u - 1e-12 {
            return v;
        }
    }
    pmf.last().map_or(0.0, |a| a.0)
}

fn min_gap(pmf: &Pmf) -> Option<f64> {
    pmf.windows(2).map(|w| w[1].0 - w[0].0).reduce(f64::min)
}

/// Gaussian-kernel density of a finite-support distribution.
pub fn kernel_density(pmf: &Pmf, x: f64, h: f64) -> f64 {
    let norm = 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt());
    pmf.iter()
        .map(|&(v, p)| {
            let z = (x - v) / h;
            p * norm * (-0.5 * z * z).exp()
        })
        .sum()
}

const TERMINAL_PMF: [(f64, f64); 1] = [(0.0, 1.0)];

impl TabularMdp {
    pub fn n_states(&self) -> usize {
        self.outcomes.len()
    }

    fn check_policy(&self, policy: &TabularPolicy) -> Result<(), OracleError> {
        if policy.len() != self.n_states() {
            return Err(OracleError::NoAnalyticDistribution(format!(
                "policy covers {} states, MDP has {}",
                policy.len(),
                self.n_states()
            )));
        }
        for (s, (pi, acts)) in policy.iter().zip(&self.outcomes).enumerate() {
            if pi.len() != acts.len() || (pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(OracleError::NoAnalyticDistribution(format!(
                    "policy row {s} is not a distribution over {} actions",
                    acts.len()
                )));
            }
            for (a, outs) in acts.iter().enumerate() {
                if (outs.iter().map(|o| o.prob).sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(OracleError::NoAnalyticDistribution(format!(
                        "outcomes of state {s} action {a} do not sum to one"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `(prob, cost, reward, next)` of every reachable joint outcome under `policy`.
    pub fn joint_outcomes(&self, policy: &TabularPolicy, s: usize) -> Vec<Outcome> {
        let mut out = Vec::new();
        for (a, outs) in self.outcomes[s].iter().enumerate() {
            for o in outs {
                let p = policy[s][a] * o.prob;
                if p > 0.0 {
                    out.push(Outcome { prob: p, ..*o });
                }
            }
        }
        out
    }

    fn order(&self) -> Result<Vec<usize>, OracleError> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let n = self.n_states();
        let mut mark = vec![0u8; n];
        let mut order = Vec::with_capacity(n);
        fn visit(
            m: &TabularMdp,
            s: usize,
            mark: &mut [u8],
            order: &mut Vec<usize>,
        ) -> Result<(), OracleError> {
            match mark[s] {
                2 => return Ok(()),
                1 => {
                    return Err(OracleError::NoAnalyticDistribution(format!(
                        "state {s} lies on a cycle"
                    )))
                }
                _ => {}
            }
            mark[s] = 1;
            for outs in &m.outcomes[s] {
                for o in outs {
                    if let Some(t) = o.next {
                        if t >= m.n_states() {
                            return Err(OracleError::NoAnalyticDistribution(format!(
                                "state {s} points at missing state {t}"
                            )));
                        }
                        visit(m, t, mark, order)?;
                    }
                }
            }
            mark[s] = 2;
            order.push(s);
            Ok(())
        }
        for s in 0..n {
            visit(self, s, &mut mark, &mut order)?;
        }
        Ok(order)
    }

    /// Exact distribution of the discounted cost-to-go from every state.
    pub fn cost_to_go_pmfs(&self, policy: &TabularPolicy) -> Result<Vec<Pmf>, OracleError> {
        self.check_policy(policy)?;
        let mut pmfs: Vec<Pmf> = vec![Vec::new(); self.n_states()];
        for s in self.order()? {
            let mut atoms = Vec::new();
            for o in self.joint_outcomes(policy, s) {
                let next: &[(f64, f64)] = match o.next {
                    Some(t) => &pmfs[t],
                    None => &TERMINAL_PMF,
                };
                atoms.extend(
                    next.iter()
                        .map(|&(v, p)| (o.cost + self.gamma * v, o.prob * p)),
                );
            }
            pmfs[s] = merge_atoms(atoms);
        }
        Ok(pmfs)
    }

    /// Exact expected discounted reward-to-go.
    pub fn values(&self, policy: &TabularPolicy) -> Result<Vec<f64>, OracleError> {
        self.check_policy(policy)?;
        let mut v = vec![0.0; self.n_states()];
        for s in self.order()? {
            v[s] = self
                .joint_outcomes(policy, s)
                .iter()
                .map(|o| o.prob * (o.reward + self.gamma * o.next.map_or(0.0, |t| v[t])))
                .sum();
        }
        Ok(v)
    }

    /// Steps from state 0; every edge must advance the layer by exactly one.
    pub fn layers(&self) -> Result<Vec<Option<usize>>, OracleError> {
        let mut layer = vec![None; self.n_states()];
        if self.n_states() == 0 {
            return Ok(layer);
        }
        layer[0] = Some(0);
        for s in self.order()?.into_iter().rev() {
            let Some(l) = layer[s] else { continue };
            for o in self.outcomes[s].iter().flatten() {
                if let Some(t) = o.next {
                    match layer[t] {
                        None => layer[t] = Some(l + 1),
                        Some(lt) if lt == l + 1 => {}
                        Some(_) => {
                            return Err(OracleError::NoAnalyticDistribution(format!(
                                "state {t} is reachable at two different depths"
                            )))
                        }
                    }
                }
            }
        }
        Ok(layer)
    }

    fn sampler(&self, policy: &TabularPolicy, s: usize) -> (Vec<Outcome>, WeightedIndex<f64>) {
        let outs = self.joint_outcomes(policy, s);
        let w = WeightedIndex::new(outs.iter().map(|o| o.prob)).expect("positive weights");
        (outs, w)
    }
}

/// Three-state fixture with Bernoulli-style costs and two actions at the start.
pub fn tabular_fixture() -> (TabularMdp, TabularPolicy) {
    let o = |prob, cost, reward, next| Outcome {
        prob,
        cost,
        reward,
        next,
    };
    let mdp = TabularMdp {
        gamma: 0.9,
        outcomes: vec![
            vec![
                vec![o(0.6, 1.0, 0.0, Some(1)), o(0.4, 0.0, 1.0, Some(2))],
                vec![o(0.7, 0.5, 0.5, Some(2)), o(0.3, 2.0, 0.0, Some(1))],
            ],
            vec![vec![o(0.5, 0.0, 1.0, None), o(0.5, 3.0, 0.0, None)]],
            vec![
                vec![o(1.0, 1.0, 0.2, None)],
                vec![o(0.2, 4.0, 2.0, None), o(0.8, 0.2, 0.0, None)],
            ],
        ],
    };
    let policy = vec![vec![0.5, 0.5], vec![1.0], vec![0.6, 0.4]];
    (mdp, policy)
}

/// Tabular form of two-path for a policy that picks path 2 with probability `p2`.
/// State 0 is the start; path `w` step `k` is `1 + w * len + k`.
pub fn two_path_tabular(cfg: &TwoPathConfig, gamma: f64, p2: f64) -> (TabularMdp, TabularPolicy) {
    let len = cfg.path_len;
    let idx = |w: usize, k: usize| 1 + w * len + k;
    let mut outcomes = vec![vec![
        vec![Outcome {
            prob: 1.0,
            cost: 0.0,
            reward: 0.0,
            next: Some(idx(0, 0)),
        }],
        vec![Outcome {
            prob: 1.0,
            cost: 0.0,
            reward: 0.0,
            next: Some(idx(1, 0)),
        }],
    ]];
    for w in 0..2 {
        for k in 0..len {
            let last = k + 1 == len;
            let next = (!last).then(|| idx(w, k + 1));
            let reward = if last { cfg.goal_reward[w] } else { 0.0 };
            let outs = if w == 0 {
                vec![
                    Outcome {
                        prob: 1.0 - cfg.spike_prob,
                        cost: cfg.base_cost,
                        reward,
                        next,
                    },
                    Outcome {
                        prob: cfg.spike_prob,
                        cost: cfg.base_cost + cfg.spike_cost,
                        reward,
                        next,
                    },
                ]
            } else {
                vec![Outcome {
                    prob: 1.0,
                    cost: cfg.safe_cost,
                    reward,
                    next,
                }]
            };
            outcomes.push(vec![outs]);
        }
    }
    let mut policy = vec![vec![1.0 - p2, p2]];
    policy.extend((0..2 * len).map(|_| vec![1.0]));
    (TabularMdp { gamma, outcomes }, policy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityStatus {
    Checked,
    /// The cost-to-go is a point mass, so the density identity is vacuous.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub status: IdentityStatus,
    pub state: usize,
    pub u: f64,
    pub quantile: f64,
    pub bandwidth: f64,
    /// Monte-Carlo mean of `p_{X(s')}((q - c) / gamma)`.
    pub lhs: f64,
    /// `gamma * p_{X(s)}(q)`.
    pub rhs: f64,
    pub lhs_exact: f64,
    pub z_pdf: f64,
    pub mean_mu: f64,
    pub z_mu: f64,
    pub n_mc: usize,
}

impl IdentityReport {
    pub fn passed(&self, z_max: f64) -> bool {
        match self.status {
            IdentityStatus::Degenerate => true,
            IdentityStatus::Checked => self.z_pdf.abs() <= z_max && self.z_mu.abs() <= z_max,
        }
    }
}

#[derive(Default)]
struct Moments {
    n: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    fn std_err(&self) -> f64 {
        let m = self.mean();
        let var = (self.sum_sq / self.n as f64 - m * m).max(0.0) * self.n as f64
            / (self.n as f64 - 1.0).max(1.0);
        (var / self.n as f64).sqrt()
    }

    fn z(&self, target: f64) -> f64 {
        let se = self.std_err();
        let d = self.mean() - target;
        if se > 0.0 {
            d / se
        } else if d.abs() < 1e-12 {
            0.0
        } else {
            f64::INFINITY.copysign(d)
        }
    }
}

/// Checks the density Bellman relation and `E[mu] = 1` at `state`.
///
/// Densities are kernel-smoothed exact PMFs: bandwidth `h` for `X(s)` and
/// `h / gamma` for `X(s')`, which makes the relation hold exactly for the
/// smoothed densities. `variant` only changes the numerator argument of mu;
/// the denominator is always the state density.
pub fn td_identity_check(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    state: usize,
    u: f64,
    n_mc: usize,
    variant: MuVariant,
    rng: &mut dyn RngCore,
) -> Result<IdentityReport, OracleError> {
    let pmfs = mdp.cost_to_go_pmfs(policy)?;
    let x = pmfs.get(state).ok_or_else(|| {
        OracleError::NoAnalyticDistribution(format!("state {state} does not exist"))
    })?;
    let q = pmf_quantile(x, u);
    let g = mdp.gamma;
    let Some(gap) = min_gap(x) else {
        return Ok(IdentityReport {
            status: IdentityStatus::Degenerate,
            state,
            u,
            quantile: q,
            bandwidth: 0.0,
            lhs: f64::NAN,
            rhs: f64::NAN,
            lhs_exact: f64::NAN,
            z_pdf: 0.0,
            mean_mu: f64::NAN,
            z_mu: 0.0,
            n_mc: 0,
        });
    };
    let h = 0.25 * gap;
    let rhs = g * kernel_density(x, q, h);
    let next_pmf = |o: &Outcome| -> &[(f64, f64)] {
        match o.next {
            Some(t) => &pmfs[t],
            None => &TERMINAL_PMF,
        }
    };
    let dens = |pmf: &[(f64, f64)], at: f64| kernel_density(&pmf.to_vec(), at, h / g);
    let (outs, sampler) = mdp.sampler(policy, state);
    let lhs_exact: f64 = outs
        .iter()
        .map(|o| o.prob * dens(next_pmf(o), (q - o.cost) / g))
        .sum();
    let (mut num, mut mu) = (Moments::default(), Moments::default());
    for _ in 0..n_mc {
        let o = &outs[sampler.sample(rng)];
        let np = next_pmf(o);
        num.push(dens(np, (q - o.cost) / g));
        mu.push(dens(np, raw_mu_target(o.cost, q, g, variant)) / rhs);
    }
    Ok(IdentityReport {
        status: IdentityStatus::Checked,
        state,
        u,
        quantile: q,
        bandwidth: h,
        lhs: num.mean(),
        rhs,
        lhs_exact,
        z_pdf: num.z(rhs),
        mean_mu: mu.mean(),
        z_mu: mu.z(1.0),
        n_mc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanReport {
    pub mean: f64,
    pub std_err: f64,
    pub z: f64,
    pub n: usize,
}

/// Mean one-step reward advantage at `state` under the exact on-policy values.
pub fn reward_advantage_check(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    state: usize,
    n_mc: usize,
    rng: &mut dyn RngCore,
) -> Result<MeanReport, OracleError> {
    let v = mdp.values(policy)?;
    let (outs, sampler) = mdp.sampler(policy, state);
    let mut m = Moments::default();
    for _ in 0..n_mc {
        let o = &outs[sampler.sample(rng)];
        let boot = o.next.map_or(0.0, |t| mdp.gamma * v[t]);
        m.push(o.reward + boot - v[state]);
    }
    Ok(MeanReport {
        mean: m.mean(),
        std_err: m.std_err(),
        z: m.z(0.0),
        n: n_mc,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlackReport {
    /// Visitation-weighted exact expectation of the smoothed quantile advantage.
    pub exact: f64,
    /// Mean over sampled transitions.
    pub mc_mean: f64,
    pub std_err: f64,
    pub z: f64,
    pub n_transitions: usize,
}

/// Smoothed-mu quantile advantage with exact quantiles and kernel densities,
/// averaged over on-policy transitions. The exact expectation is the slack of
/// the quantile TD relation; it is generally not zero.
pub fn quantile_advantage_slack(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    u: f64,
    c_clip: f64,
    n_transitions: usize,
    rng: &mut dyn RngCore,
) -> Result<SlackReport, OracleError> {
    let pmfs = mdp.cost_to_go_pmfs(policy)?;
    let layers = mdp.layers()?;
    let g = mdp.gamma;
    let h0 = 0.25
        * pmfs
            .iter()
            .filter_map(min_gap)
            .reduce(f64::min)
            .ok_or_else(|| {
                OracleError::NoAnalyticDistribution("every cost-to-go is a point mass".into())
            })?;
    let h = |s: usize| h0 / g.powi(layers[s].unwrap_or(0) as i32);
    let q: Vec<f64> = pmfs.iter().map(|p| pmf_quantile(p, u)).collect();
    let adv = |s: usize, o: &Outcome| -> f64 {
        let hs = h(s);
        let (np, qn): (&[(f64, f64)], f64) = match o.next {
            Some(t) => (&pmfs[t], q[t]),
            None => (&TERMINAL_PMF, 0.0),
        };
        let num = kernel_density(&np.to_vec(), raw_mu_target(o.cost, q[s], g, MuVariant::StateTail), hs / g);
        let den = g * kernel_density(&pmfs[s], q[s], hs);
        let smoothed = smooth_log_mu(num.ln() - den.ln(), c_clip);
        smoothed * (o.cost + g * qn - q[s])
    };

    // exact expectation over the visitation distribution of transitions
    let mut visit = vec![0.0; mdp.n_states()];
    visit[0] = 1.0;
    let mut exact = 0.0;
    let mut mass = 0.0;
    for s in mdp.order()?.into_iter().rev() {
        if visit[s] == 0.0 {
            continue;
        }
        for o in mdp.joint_outcomes(policy, s) {
            exact += visit[s] * o.prob * adv(s, &o);
            if let Some(t) = o.next {
                visit[t] += visit[s] * o.prob;
            }
        }
        mass += visit[s];
    }
    exact /= mass;

    let samplers: Vec<_> = (0..mdp.n_states()).map(|s| mdp.sampler(policy, s)).collect();
    let mut m = Moments::default();
    let mut s = 0;
    while m.n < n_transitions {
        let (outs, w) = &samplers[s];
        let o = &outs[w.sample(rng)];
        m.push(adv(s, o));
        s = o.next.unwrap_or(0);
    }
    Ok(SlackReport {
        exact,
        mc_mean: m.mean(),
        std_err: m.std_err(),
        z: m.z(exact),
        n_transitions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub u: f64,
    pub quantile: f64,
    pub outage: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `mc_outage(d = mc_quantile(u))` against `1 - u`, with independent rollouts
/// for the two estimates and a binomial `3 sigma` band on the outage count.
pub fn duality_check(
    policy: &dyn StochasticPolicy,
    env: &mut Env,
    u: f64,
    n_quantile: usize,
    n_outage: usize,
    gamma: f64,
    rng: &mut dyn RngCore,
) -> Result<DualityReport, OracleError> {
    let q = mc_quantile(policy, env, u, n_quantile, gamma, rng)?;
    let out = mc_outage(policy, env, q, n_outage, gamma, rng)?;
    let tol = 3.0 * (u * (1.0 - u) / n_outage as f64).sqrt();
    Ok(DualityReport {
        u,
        quantile: q,
        outage: out,
        expected: 1.0 - u,
        tolerance: tol,
        passed: (out - (1.0 - u)).abs() <= tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeibullRecovery {
    pub truth: WeibullParams,
    pub noiseless: WeibullParams,
    pub empirical: WeibullParams,
    pub n_samples: usize,
}

/// Fits the top `k` of `n_q` midpoint quantiles, first exact and then from
/// `n_samples` Weibull draws.
pub fn weibull_recovery(
    truth: WeibullParams,
    n_q: usize,
    k: usize,
    n_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<WeibullRecovery, OracleError> {
    let fr = quantile_fractions(n_q).map_err(|e| OracleError::NoAnalyticDistribution(e.to_string()))?;
    let top = &fr[n_q - k..];
    let init = WeibullParams::new(1.0, 1.0).expect("valid");
    let fit = |pts: &[(f64, f64)]| {
        fit_weibull(pts, init, 4000, 0.02)
            .map(|r| r.0)
            .map_err(|e| OracleError::NoAnalyticDistribution(e.to_string()))
    };
    let exact: Vec<(f64, f64)> = top
        .iter()
        .map(|&u| (u, weibull_quantile(u, truth).expect("fraction in (0,1)")))
        .collect();
    let draws: Vec<f64> = (0..n_samples)
        .map(|_| {
            let v: f64 = rng.random::<f64>();
            truth.beta * (-(1.0 - v).ln()).powf(1.0 / truth.alpha)
        })
        .collect();
    let emp: Vec<(f64, f64)> = top
        .iter()
        .map(|&u| (u, empirical_quantile(&draws, u).expect("non-empty")))
        .collect();
    Ok(WeibullRecovery {
        truth,
        noiseless: fit(&exact)?,
        empirical: fit(&emp)?,
        n_samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub n_params: usize,
}

/// Finite differences against the tape on a small critic-shaped loss
/// combining the quantile Huber, log-softmax and tail-shaped ops.
pub fn autodiff_check(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let qnet = Mlp::new(MlpSpec::tanh(3, &[7], 5), "q", &mut store, 1.0, &mut rng);
    let pnet = Mlp::new(
        MlpSpec::tanh(3, &[6], 2).with_output(OutputActivation::Linear),
        "pi",
        &mut store,
        1.0,
        &mut rng,
    );
    let x = Matrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
    let targets = Matrix::from_vec(4, 5, (0..20).map(|_| rng.random_range(-1.0..2.0)).collect());
    let fr = quantile_fractions(5).expect("n_q > 0");
    let acts = [0usize, 1, 1, 0];
    let loss = |store: &ParamStore, grad: bool| -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let q = qnet.forward_tape(&mut t, store, xv);
        let lq = t.quantile_huber(q, targets.clone(), &fr, 0.5);
        let logits = pnet.forward_tape(&mut t, store, xv);
        let lp = t.log_softmax(logits);
        let g = t.gather(lp, &acts);
        let e = t.exp(g);
        let m = t.mean(e);
        let l = t.sub(lq, m);
        let v = t.scalar(l);
        let gr = if grad {
            t.backward(l).expect("scalar loss").wrt(store)
        } else {
            Vec::new()
        };
        (v, gr)
    };
    let (_, g) = loss(&store, true);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..store.len() {
        let mut sp = store.clone();
        sp.values_mut()[k] += h;
        let lp = loss(&sp, false).0;
        sp.values_mut()[k] -= 2.0 * h;
        let lm = loss(&sp, false).0;
        let fd = (lp - lm) / (2.0 * h);
        let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-3);
        worst = worst.max(err);
    }
    GradCheck {
        max_rel_err: worst,
        n_params: store.len(),
    }
}

/// Deliberate faults for checking that the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    FlipMuSign,
}

pub const CHECK_NAMES: [&str; 5] = ["td_identity", "pinball", "weibull", "duality", "autodiff"];

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Restricts the run to these check names.
    pub only: Option<Vec<String>>,
    pub fault: Option<Fault>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub summary: String,
    pub detail: serde_json::Value,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckReport>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            s.push_str(&format!(
                "{mark}  {:<12} {:>7.2}s  {}\n",
                c.name, c.seconds, c.summary
            ));
        }
        s
    }
}

fn check_td_identity(opts: &SuiteOptions) -> Result<(bool, String, serde_json::Value), OracleError> {
    let (mdp, policy) = tabular_fixture();
    let variant = match opts.fault {
        Some(Fault::FlipMuSign) => MuVariant::FlippedCostSign,
        None => MuVariant::StateTail,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r = td_identity_check(&mdp, &policy, 0, 0.9, 1_000_000, variant, &mut rng)?;
    let ok = r.status == IdentityStatus::Checked && r.passed(3.0);
    let summary = format!("z_pdf={:+.2} z_mu={:+.2} E[mu]={:.4}", r.z_pdf, r.z_mu, r.mean_mu);
    Ok((ok, summary, serde_json::to_value(&r).expect("serializable")))
}

fn check_pinball() -> Result<(bool, String, serde_json::Value), OracleError> {
    let two = pinball_bruteforce_min(&[0.0, 1.0], 0.5, 0.01)?;
    let hundred: Vec<f64> = (1..=100).map(f64::from).collect();
    let h = pinball_bruteforce_min(&hundred, 0.9, 0.1)?;
    let eq = empirical_quantile(&hundred, 0.9).map_err(|_| OracleError::EmptySample)?;
    let sym = pinball_bruteforce_min(&[-1.0, 0.0, 1.0], 0.5, 0.01)?;
    let ok = (two.loss - 0.25).abs() < 1e-12
        && (0.0..=1.0).contains(&two.argmin)
        && (h.argmin - eq).abs() <= 0.1 + 1e-9
        && sym.argmin.abs() < 1e-9;
    let summary = format!(
        "{{0,1}} loss={:.4}; 1..100 argmin={:.2} vs order statistic {eq}",
        two.loss, h.argmin
    );
    let detail = serde_json::json!({ "two_point": two, "hundred": h, "order_statistic": eq, "symmetric": sym });
    Ok((ok, summary, detail))
}

fn check_weibull(opts: &SuiteOptions) -> Result<(bool, String, serde_json::Value), OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let truth = WeibullParams::new(1.5, 2.0).expect("valid");
    let r = weibull_recovery(truth, 25, 8, 10_000, &mut rng)?;
    let ok = (r.noiseless.alpha - 1.5).abs() <= 0.05
        && (r.noiseless.beta - 2.0).abs() <= 0.05
        && (r.empirical.alpha - 1.5).abs() <= 0.15
        && (r.empirical.beta - 2.0).abs() <= 0.2;
    let summary = format!(
        "noiseless ({:.3}, {:.3}) empirical ({:.3}, {:.3})",
        r.noiseless.alpha, r.noiseless.beta, r.empirical.alpha, r.empirical.beta
    );
    Ok((ok, summary, serde_json::to_value(&r).expect("serializable")))
}

fn check_duality(opts: &SuiteOptions) -> Result<(bool, String, serde_json::Value), OracleError> {
    let mut env = Env::new(EnvConfig::hazard_grid())?;
    let policy = UniformPolicy(env.action_space());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::new();
    for u in [0.8, 0.9] {
        reports.push(duality_check(&policy, &mut env, u, 40_000, 10_000, 0.99, &mut rng)?);
    }
    let ok = reports.iter().all(|r| r.passed);
    let summary = reports
        .iter()
        .map(|r| format!("u={} outage={:.4}±{:.4}", r.u, r.outage, r.tolerance))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((ok, summary, serde_json::to_value(&reports).expect("serializable")))
}

fn check_autodiff(opts: &SuiteOptions) -> Result<(bool, String, serde_json::Value), OracleError> {
    let r = autodiff_check(opts.seed);
    let ok = r.max_rel_err <= 1e-4;
    let summary = format!("max relative error {:.2e} over {} params", r.max_rel_err, r.n_params);
    Ok((ok, summary, serde_json::to_value(&r).expect("serializable")))
}

/// Runs the named checks in a fixed order.
pub fn run_suite(opts: &SuiteOptions) -> SuiteReport {
    let mut checks = Vec::new();
    for name in CHECK_NAMES {
        if let Some(only) = &opts.only {
            if !only.iter().any(|o| o == name) {
                continue;
            }
        }
        let t0 = Instant::now();
        let res = match name {
            "td_identity" => check_td_identity(opts),
            "pinball" => check_pinball(),
            "weibull" => check_weibull(opts),
            "duality" => check_duality(opts),
            _ => check_autodiff(opts),
        };
        let (passed, summary, detail) = match res {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}"), serde_json::Value::Null),
        };
        checks.push(CheckReport {
            name: name.to_string(),
            passed,
            summary,
            detail,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    SuiteReport { checks }
}
