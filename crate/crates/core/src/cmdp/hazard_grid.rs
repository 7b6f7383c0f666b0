use super::{Action, ActionSpace, CmdpError};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Grid world with stochastic hazard costs charged on entry.
///
/// Cells are `[row, col]`. Actions 0..4 move up, down, left, right; moves into
/// the border leave the agent in place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HazardGridConfig {
    pub size: usize,
    pub start: [usize; 2],
    pub goal: [usize; 2],
    pub hazards: Vec<[usize; 2]>,
    pub hazard_base: f64,
    pub hazard_spike: f64,
    pub hazard_prob: f64,
    pub distance_scale: f64,
    pub goal_bonus: f64,
    /// Send the agent back to `start` on reaching the goal instead of ending the episode.
    pub respawn: bool,
    /// Use a 2-D box action mapped onto its dominant axis.
    pub continuous_actions: bool,
}

impl Default for HazardGridConfig {
    fn default() -> Self {
        Self {
            size: 7,
            start: [3, 0],
            goal: [3, 6],
            hazards: (1..7).map(|r| [r, 3]).collect(),
            hazard_base: 0.5,
            hazard_spike: 0.5,
            hazard_prob: 0.5,
            distance_scale: 0.1,
            goal_bonus: 1.0,
            respawn: true,
            continuous_actions: false,
        }
    }
}

impl HazardGridConfig {
    /// Corner-to-corner layout on an `n x n` grid with a diagonal band of hazards.
    pub fn corner(n: usize) -> Self {
        let mut hazards = Vec::new();
        for r in 1..n.saturating_sub(1) {
            hazards.push([r, n - 1 - r]);
        }
        Self {
            size: n,
            start: [0, 0],
            goal: [n - 1, n - 1],
            hazards,
            respawn: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct HazardGrid {
    cfg: HazardGridConfig,
    is_hazard: Vec<bool>,
    pos: (usize, usize),
}

fn dist(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dr = a.0 as f64 - b.0 as f64;
    let dc = a.1 as f64 - b.1 as f64;
    (dr * dr + dc * dc).sqrt()
}

impl HazardGrid {
    pub fn new(cfg: HazardGridConfig) -> Result<Self, CmdpError> {
        let n = cfg.size;
        if n < 2 {
            return Err(CmdpError::BadConfig("hazard_grid.size must be at least 2".into()));
        }
        let inside = |c: [usize; 2]| c[0] < n && c[1] < n;
        if !inside(cfg.start) || !inside(cfg.goal) || cfg.start == cfg.goal {
            return Err(CmdpError::BadConfig(
                "hazard_grid start and goal must be distinct cells inside the grid".into(),
            ));
        }
        let mut is_hazard = vec![false; n * n];
        for &h in &cfg.hazards {
            if !inside(h) || h == cfg.start || h == cfg.goal {
                return Err(CmdpError::BadConfig(format!(
                    "hazard {h:?} is outside the grid or on start/goal"
                )));
            }
            is_hazard[h[0] * n + h[1]] = true;
        }
        if cfg.hazard_base < 0.0 || cfg.hazard_spike < 0.0 {
            return Err(CmdpError::BadConfig("hazard costs must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&cfg.hazard_prob) {
            return Err(CmdpError::BadConfig("hazard_prob must lie in [0, 1]".into()));
        }
        let pos = (cfg.start[0], cfg.start[1]);
        Ok(Self {
            cfg,
            is_hazard,
            pos,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.cfg.size * self.cfg.size + 1
    }

    pub fn action_space(&self) -> ActionSpace {
        if self.cfg.continuous_actions {
            ActionSpace::Continuous { dim: 2, bound: 1.0 }
        } else {
            ActionSpace::Discrete(4)
        }
    }

    pub fn reset(&mut self) {
        self.pos = (self.cfg.start[0], self.cfg.start[1]);
    }

    pub fn position(&self) -> (usize, usize) {
        self.pos
    }

    pub fn goal(&self) -> (usize, usize) {
        (self.cfg.goal[0], self.cfg.goal[1])
    }

    pub fn is_hazard(&self, cell: (usize, usize)) -> bool {
        self.is_hazard[cell.0 * self.cfg.size + cell.1]
    }

    /// One-hot cell followed by elapsed-time fraction.
    pub fn observation(&self, time_frac: f64) -> Vec<f64> {
        let n = self.cfg.size;
        let mut o = vec![0.0; n * n + 1];
        o[self.pos.0 * n + self.pos.1] = 1.0;
        o[n * n] = time_frac;
        o
    }

    fn direction(&self, action: &Action) -> Result<usize, CmdpError> {
        match (action, self.cfg.continuous_actions) {
            (Action::Discrete(a), false) if *a < 4 => Ok(*a),
            (Action::Continuous(v), true) if v.len() == 2 && v.iter().all(|x| x.is_finite()) => {
                Ok(if v[0].abs() >= v[1].abs() {
                    if v[0] < 0.0 {
                        0
                    } else {
                        1
                    }
                } else if v[1] < 0.0 {
                    2
                } else {
                    3
                })
            }
            (other, _) => Err(CmdpError::InvalidAction(other.clone())),
        }
    }

    /// Deterministic move, ignoring goal handling.
    pub fn next_cell(&self, cell: (usize, usize), dir: usize) -> (usize, usize) {
        let n = self.cfg.size;
        let (r, c) = cell;
        match dir {
            0 => (r.saturating_sub(1), c),
            1 => ((r + 1).min(n - 1), c),
            2 => (r, c.saturating_sub(1)),
            _ => (r, (c + 1).min(n - 1)),
        }
    }

    pub fn step<R: Rng + ?Sized>(
        &mut self,
        action: &Action,
        rng: &mut R,
    ) -> Result<(f64, f64, bool), CmdpError> {
        let dir = self.direction(action)?;
        let goal = self.goal();
        let next = self.next_cell(self.pos, dir);
        let entered = next != self.pos && self.is_hazard(next);
        let cost = if entered {
            let spike = rng.random_bool(self.cfg.hazard_prob);
            self.cfg.hazard_base + if spike { self.cfg.hazard_spike } else { 0.0 }
        } else {
            0.0
        };
        let at_goal = next == goal;
        let reward = self.cfg.distance_scale * (dist(self.pos, goal) - dist(next, goal))
            + if at_goal { self.cfg.goal_bonus } else { 0.0 };
        let done = at_goal && !self.cfg.respawn;
        self.pos = if at_goal && self.cfg.respawn {
            (self.cfg.start[0], self.cfg.start[1])
        } else {
            next
        };
        Ok((reward, cost, done))
    }
}
